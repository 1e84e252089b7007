"""Middlebury ``.flo`` I/O and flow preprocessing for the predictor input.

A ``.flo`` file is little-endian: the float32 magic ``202021.25``, int32
width and height, then ``width * height`` interleaved ``(u, v)`` float32
pairs in row-major order.

On disk, flow for video ``V`` lives at ``<root>/V/<frame>.flo``; the field
stored at frame ``t`` is the motion from frame ``t - 1`` to frame ``t``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from trajforecast.io import atomic_write_bytes

FLO_MAGIC = 202021.25
_HEADER = struct.Struct("<fii")


class FloFormatError(ValueError):
    pass


class EmptyIntersection(ValueError):
    pass


@dataclass
class FlowField:
    """Dense ``(height, width, 2)`` displacement field in pixels per frame."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or data.shape[2] != 2:
            raise ValueError(f"flow data must be (H, W, 2), got {data.shape}")
        self.data = data

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def u(self) -> np.ndarray:
        return self.data[..., 0]

    @property
    def v(self) -> np.ndarray:
        return self.data[..., 1]

    def __eq__(self, other):
        if not isinstance(other, FlowField):
            return NotImplemented
        return self.data.shape == other.data.shape and np.array_equal(self.data, other.data)


def flo_read(buf: bytes) -> FlowField:
    if len(buf) < _HEADER.size:
        raise FloFormatError("truncated header")
    magic, width, height = _HEADER.unpack_from(buf, 0)
    if magic != FLO_MAGIC:
        raise FloFormatError(f"bad magic {magic!r}")
    if width <= 0 or height <= 0:
        raise FloFormatError(f"nonpositive dimensions {width}x{height}")
    count = width * height * 2
    if len(buf) - _HEADER.size < count * 4:
        raise FloFormatError(f"truncated payload: expected {count * 4} bytes")
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=_HEADER.size)
    return FlowField(data.reshape(height, width, 2).astype(np.float32))


def flo_write(field: FlowField) -> bytes:
    header = _HEADER.pack(FLO_MAGIC, field.width, field.height)
    return header + np.ascontiguousarray(field.data, dtype="<f4").tobytes()


def read_flo(path) -> FlowField:
    return flo_read(Path(path).read_bytes())


def write_flo(path, field: FlowField) -> None:
    atomic_write_bytes(path, flo_write(field))


def flo_path(root, video_id: str, frame: int) -> Path:
    return Path(root) / str(video_id) / f"{int(frame)}.flo"


@dataclass(frozen=True)
class PreprocessConfig:
    clip: float = 50.0
    resize_to: int = 256
    crop_to: int = 224
    crop_mode: str = "center"  # or "random"
    seed: int = 0

    def __post_init__(self):
        if self.clip <= 0:
            raise ValueError("clip must be positive")
        if not 0 < self.crop_to <= self.resize_to:
            raise ValueError("need 0 < crop_to <= resize_to")
        if self.crop_mode not in ("center", "random"):
            raise ValueError(f"unknown crop_mode {self.crop_mode!r}")


def square_region(box, width: int, height: int) -> tuple[float, float, float, float]:
    """Box grown to a square about its center and clipped to the frame."""
    x1, y1, x2, y2 = (float(c) for c in box)
    side = max(x2 - x1, y2 - y1)
    cx, cy = (x1 + x2) / 2, (y1 + y2) / 2
    rx1, ry1 = max(cx - side / 2, 0.0), max(cy - side / 2, 0.0)
    rx2, ry2 = min(cx + side / 2, float(width)), min(cy + side / 2, float(height))
    if rx2 <= rx1 or ry2 <= ry1:
        raise EmptyIntersection(f"box {tuple(box)} does not overlap a {width}x{height} frame")
    return rx1, ry1, rx2, ry2


def _sample_axis(lo: float, hi: float, size: int, limit: int):
    # pixel j covers [j, j+1); sample output pixel centers
    pos = lo + (np.arange(size) + 0.5) * ((hi - lo) / size) - 0.5
    pos = np.clip(pos, 0.0, limit - 1)
    i0 = np.floor(pos).astype(np.intp)
    i1 = np.minimum(i0 + 1, limit - 1)
    return i0, i1, pos - i0


def resize_region(field: FlowField, region, size: int) -> FlowField:
    """Bilinearly resample ``region = (x1, y1, x2, y2)`` of ``field`` to ``size x size``."""
    x1, y1, x2, y2 = region
    r0, r1, fy = _sample_axis(y1, y2, size, field.height)
    c0, c1, fx = _sample_axis(x1, x2, size, field.width)
    d = field.data.astype(np.float64)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = d[r0][:, c0] * (1 - fx) + d[r0][:, c1] * fx
    bottom = d[r1][:, c0] * (1 - fx) + d[r1][:, c1] * fx
    return FlowField(top * (1 - fy) + bottom * fy)


def crop_offset(cfg: PreprocessConfig, rng: np.random.Generator | None = None) -> tuple[int, int]:
    slack = cfg.resize_to - cfg.crop_to
    if cfg.crop_mode == "center":
        return slack // 2, slack // 2
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    oy, ox = rng.integers(0, slack + 1, size=2)
    return int(oy), int(ox)


def crop(field: FlowField, size: int, offset: tuple[int, int]) -> FlowField:
    oy, ox = offset
    if oy < 0 or ox < 0 or oy + size > field.height or ox + size > field.width:
        raise ValueError(f"crop {size} at {offset} exceeds {field.height}x{field.width}")
    return FlowField(field.data[oy:oy + size, ox:ox + size])


def crop_resize(field: FlowField, box, cfg: PreprocessConfig, offset=None,
                rng: np.random.Generator | None = None) -> FlowField:
    region = square_region(box, field.width, field.height)
    resized = resize_region(field, region, cfg.resize_to)
    if offset is None:
        offset = crop_offset(cfg, rng)
    return crop(resized, cfg.crop_to, offset)


def normalize(field: FlowField, clip: float = 50.0) -> FlowField:
    """Clamp displacements to ``[-clip, clip]`` and map linearly onto ``[0, 1]``."""
    if clip <= 0:
        raise ValueError("clip must be positive")
    return FlowField((np.clip(field.data, -clip, clip) + clip) / (2 * clip))


def stack(fields) -> np.ndarray:
    """Channels-first stack ``[u_0, v_0, u_1, v_1, ...]`` of equally sized fields."""
    fields = list(fields)
    if not fields:
        raise ValueError("cannot stack zero flow fields")
    shape = fields[0].data.shape
    for f in fields[1:]:
        if f.data.shape != shape:
            raise ValueError(f"flow dimension mismatch: {f.data.shape} vs {shape}")
    return np.concatenate([np.moveaxis(f.data, 2, 0) for f in fields], axis=0)
