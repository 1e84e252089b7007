"""Small convolutional flow-stack predictor with hand-written backprop.

The network maps a ``(2*m_f, S, S)`` flow stack to ``2*n`` numbers read as
``n`` correction vectors ``(dx, dy)`` added to the CV forecast. Layers are
stride-``s`` convolutions with ``k // 2`` zero padding and a pointwise
activation, then global average pooling and one affine head. The head
starts at zero, so an untrained model reproduces constant velocity exactly.

Activations are kept channels-last internally (``B, H, W, C``).
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from trajforecast.io import atomic_write_bytes
from trajforecast.kinematics import recover_locations


class ShapeMismatch(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class NetSpec:
    in_channels: int = 18
    input_size: int = 224
    conv: tuple[tuple[int, int, int], ...] = ((8, 3, 2), (16, 3, 2))
    horizon: int = 15
    activation: str = "relu"
    precision: int = 32
    input_offset: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "conv", tuple(tuple(int(x) for x in layer) for layer in self.conv))
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.precision not in (32, 64):
            raise ValueError("precision must be 32 or 64")
        if self.in_channels < 1 or self.input_size < 1 or self.horizon < 1:
            raise ValueError("in_channels, input_size and horizon must be positive")

    @property
    def out_dim(self) -> int:
        return 2 * self.horizon

    @property
    def dtype(self):
        return np.float32 if self.precision == 32 else np.float64

    def param_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        shapes, c = [], self.in_channels
        for i, (out, k, _) in enumerate(self.conv):
            shapes += [(f"conv{i}.w", (k * k * c, out)), (f"conv{i}.b", (out,))]
            c = out
        shapes += [("head.w", (c, self.out_dim)), ("head.b", (self.out_dim,))]
        return shapes

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "NetSpec":
        d = json.loads(text)
        d["conv"] = tuple(tuple(layer) for layer in d["conv"])
        return cls(**d)


def _relu(z):
    return np.maximum(z, 0)


def _relu_grad(z, a):
    return (z > 0).astype(z.dtype)


def _tanh_grad(z, a):
    return 1 - a * a


ACTIVATIONS = {"relu": (_relu, _relu_grad), "tanh": (np.tanh, _tanh_grad)}


@dataclass
class ModelParams:
    spec: NetSpec
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "ModelParams":
        return ModelParams(self.spec, {k: v.copy() for k, v in self.arrays.items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([self.arrays[k].ravel() for k, _ in self.spec.param_shapes()])

    @property
    def size(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.spec.param_shapes())


def init_params(spec: NetSpec, seed: int = 0, head_scale: float = 0.0) -> ModelParams:
    """He-normal conv weights, zero biases, head scaled by ``head_scale`` (zero by default)."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in spec.param_shapes():
        if name.endswith(".b"):
            arrays[name] = np.zeros(shape, dtype=spec.dtype)
        elif name.startswith("conv"):
            arrays[name] = (rng.normal(size=shape) * np.sqrt(2.0 / shape[0])).astype(spec.dtype)
        else:
            arrays[name] = (rng.normal(size=shape) * head_scale / np.sqrt(shape[0])).astype(spec.dtype)
    return ModelParams(spec, arrays)


def _out_size(size: int, k: int, s: int) -> int:
    p = k // 2
    return (size + 2 * p - k) // s + 1


def _im2col(x, k, s):
    b, h, w, c = x.shape
    p = k // 2
    ho, wo = _out_size(h, k, s), _out_size(w, k, s)
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    cols = [xp[:, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s, :] for i in range(k) for j in range(k)]
    return np.concatenate(cols, axis=3), xp.shape


def _col2im(dcols, xp_shape, k, s, c):
    b, hp, wp, _ = xp_shape
    p = k // 2
    ho, wo = dcols.shape[1], dcols.shape[2]
    dxp = np.zeros(xp_shape, dtype=dcols.dtype)
    idx = 0
    for i in range(k):
        for j in range(k):
            dxp[:, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s, :] += dcols[..., idx * c:(idx + 1) * c]
            idx += 1
    return dxp[:, p:hp - p, p:wp - p, :]


def _check_input(params: ModelParams, x: np.ndarray) -> np.ndarray:
    spec = params.spec
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[None]
    want = (spec.in_channels, spec.input_size, spec.input_size)
    if x.ndim != 4 or x.shape[1:] != want:
        raise ShapeMismatch(f"expected flow stacks of shape (B, {want[0]}, {want[1]}, {want[2]}), got {x.shape}")
    return x


def _forward(params: ModelParams, x: np.ndarray):
    spec = params.spec
    act, _ = ACTIVATIONS[spec.activation]
    a = np.moveaxis(x.astype(spec.dtype, copy=False), 1, 3)
    if spec.input_offset:
        a = a - spec.input_offset
    cache = []
    for i, (out, k, s) in enumerate(spec.conv):
        cols, xp_shape = _im2col(a, k, s)
        z = cols @ params.arrays[f"conv{i}.w"] + params.arrays[f"conv{i}.b"]
        a_next = act(z)
        cache.append((cols, xp_shape, z, a_next, a.shape[3]))
        a = a_next
    pooled = a.mean(axis=(1, 2))
    y = pooled @ params.arrays["head.w"] + params.arrays["head.b"]
    return y, (cache, a.shape, pooled)


def forward(params: ModelParams, x) -> np.ndarray:
    """Corrections of shape ``(B, n, 2)`` (or ``(n, 2)`` for a single stack)."""
    single = np.asarray(x).ndim == 3
    x = _check_input(params, x)
    y, _ = _forward(params, x)
    y = y.reshape(len(x), params.spec.horizon, 2)
    return y[0] if single else y


def loss_and_grad(params: ModelParams, x, target) -> tuple[float, dict[str, np.ndarray]]:
    """Mean squared error over batch and outputs, with its gradient."""
    spec = params.spec
    x = _check_input(params, x)
    target = np.asarray(target, dtype=spec.dtype).reshape(len(x), -1)
    if target.shape[1] != spec.out_dim:
        raise ShapeMismatch(f"targets carry {target.shape[1]} values, model emits {spec.out_dim}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(target))):
        raise ValueError("non-finite input or target")
    y, (cache, a_shape, pooled) = _forward(params, x)
    diff = y - target
    loss = float(np.mean(diff * diff))
    dy = (2.0 / diff.size) * diff
    grads = {"head.w": pooled.T @ dy, "head.b": dy.sum(axis=0)}
    b, h, w, c = a_shape
    da = np.broadcast_to((dy @ params.arrays["head.w"].T)[:, None, None, :] / (h * w), a_shape)
    _, act_grad = ACTIVATIONS[spec.activation]
    for i in reversed(range(len(spec.conv))):
        cols, xp_shape, z, a_out, c_in = cache[i]
        _, k, s = spec.conv[i]
        dz = da * act_grad(z, a_out)
        flat_dz = dz.reshape(-1, dz.shape[3])
        grads[f"conv{i}.w"] = cols.reshape(-1, cols.shape[3]).T @ flat_dz
        grads[f"conv{i}.b"] = flat_dz.sum(axis=0)
        if i > 0:
            da = _col2im(dz @ params.arrays[f"conv{i}.w"].T, xp_shape, k, s, c_in)
    return loss, {k: grads[k].astype(spec.dtype, copy=False) for k, _ in spec.param_shapes()}


def predict_locations(params: ModelParams, flow, cv_pred) -> np.ndarray:
    """Final forecast: CV forecast plus the predicted correction."""
    corr = forward(params, flow)
    cv_pred = np.asarray(cv_pred, dtype=np.float64)
    if corr.shape != cv_pred.shape:
        raise ShapeMismatch(f"correction {corr.shape} vs forecast {cv_pred.shape}")
    return recover_locations(cv_pred, corr.astype(np.float64))


# checkpoints: magic, version, spec json, precision flag, flat payload, sha256

_MAGIC = b"TFCKPT01"


def checkpoint_bytes(params: ModelParams) -> bytes:
    spec = params.spec
    desc = spec.to_json().encode()
    payload = params.flat().astype("<f4" if spec.precision == 32 else "<f8").tobytes()
    body = (_MAGIC + struct.pack("<I", len(desc)) + desc + struct.pack("<B", spec.precision)
            + struct.pack("<Q", len(payload)) + payload)
    return body + hashlib.sha256(body).digest()


def params_from_bytes(buf: bytes) -> ModelParams:
    if len(buf) < len(_MAGIC) + 32 or not buf.startswith(_MAGIC):
        raise CheckpointError("not a checkpoint (bad magic)")
    body, digest = buf[:-32], buf[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint checksum mismatch")
    off = len(_MAGIC)
    (n,) = struct.unpack_from("<I", body, off)
    off += 4
    spec = NetSpec.from_json(body[off:off + n].decode())
    off += n
    (precision,) = struct.unpack_from("<B", body, off)
    off += 1
    (nbytes,) = struct.unpack_from("<Q", body, off)
    off += 8
    if precision != spec.precision:
        raise CheckpointError("precision flag disagrees with the stored NetSpec")
    flat = np.frombuffer(body, dtype="<f4" if precision == 32 else "<f8", count=nbytes // (precision // 8),
                         offset=off)
    arrays, pos = {}, 0
    for name, shape in spec.param_shapes():
        size = int(np.prod(shape))
        arrays[name] = flat[pos:pos + size].reshape(shape).astype(spec.dtype)
        pos += size
    if pos != len(flat):
        raise CheckpointError("payload length does not match the NetSpec")
    return ModelParams(spec, arrays)


def save_params(path, params: ModelParams) -> None:
    atomic_write_bytes(path, checkpoint_bytes(params))


def load_params(path) -> ModelParams:
    with open(path, "rb") as fh:
        return params_from_bytes(fh.read())
