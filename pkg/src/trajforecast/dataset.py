"""Sliding-window samples over tracks, video-level splits, and JSONL manifests.

A sample anchored at frame ``t`` sees the flow fields ``t-m_f+1 .. t`` (motion
over frames ``t-m_f .. t``) and the centroids ``t-m_v .. t``; it is scored on
the centroids ``t+1 .. t+n``.
"""

from __future__ import annotations

import json
import re
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from trajforecast.annotate import natural_key
from trajforecast.flow import FlowField, PreprocessConfig, crop, crop_offset, flo_path, normalize, read_flo, resize_region, square_region, stack
from trajforecast.kinematics import ForecastConfig, Track, cv_forecast, estimate_velocity, residual_target

FlowSource = Callable[[str, int], FlowField]


class UncoveredVideo(KeyError):
    pass


class TooFewVideos(ValueError):
    pass


@dataclass
class Sample:
    video_id: str
    track_id: str
    anchor: int
    flow: np.ndarray | None  # (2*m_f, S, S), values in [0, 1]
    past: np.ndarray  # (m_v+1, 2)
    cv_pred: np.ndarray  # (n, 2)
    truth: np.ndarray  # (n, 2)
    target: np.ndarray  # (n, 2), truth - cv_pred
    flow_boxes: np.ndarray | None = None  # (m_f, 4) crop box per flow frame
    crop: tuple[int, int] = (0, 0)

    @property
    def key(self):
        return (natural_key(self.video_id), natural_key(self.track_id), self.anchor)


class DirectoryFlowSource:
    """Reads ``<root>/<video>/<frame>.flo``."""

    def __init__(self, root):
        self.root = Path(root)

    def __call__(self, video_id: str, frame: int) -> FlowField:
        return read_flo(flo_path(self.root, video_id, frame))


def history_needed(cfg: ForecastConfig, min_history: int | None = None) -> int:
    need = max(cfg.flow_stack, cfg.velocity_window)
    if min_history is not None:
        need = max(need, min_history)
    return need


def valid_anchors(track: Track, cfg: ForecastConfig, stride: int = 1,
                  min_history: int | None = None) -> list[int]:
    first = track.start_frame + history_needed(cfg, min_history)
    last = track.end_frame - cfg.horizon
    return list(range(first, last + 1, stride))


def _sample_seed(seed: int, video_id: str, track_id: str, anchor: int) -> list[int]:
    return [int(seed), zlib.crc32(f"{video_id}/{track_id}/{anchor}".encode())]


def build_samples(track: Track, flow_source: FlowSource | None, cfg: ForecastConfig = ForecastConfig(),
                  pre: PreprocessConfig = PreprocessConfig(), *, stride: int = 1,
                  min_history: int | None = None, dtype=np.float32) -> list[Sample]:
    """One sample per valid anchor of ``track``; short tracks give ``[]``.

    With ``flow_source=None`` only the kinematic fields are filled, which is
    enough for the CV/CA baselines.
    """
    anchors = valid_anchors(track, cfg, stride, min_history)
    if not anchors:
        return []
    cents = track.centroids()
    m_f, m_v, n = cfg.flow_stack, cfg.velocity_window, cfg.horizon
    resized: dict[int, FlowField] = {}

    def resized_field(frame):
        if frame not in resized:
            raw = flow_source(track.video_id, frame)
            region = square_region(track.box(frame), raw.width, raw.height)
            resized[frame] = resize_region(raw, region, pre.resize_to)
        return resized[frame]

    samples = []
    for t in anchors:
        i = t - track.start_frame
        past = cents[i - m_v:i + 1]
        truth = cents[i + 1:i + n + 1]
        cv = cv_forecast(past[-1], estimate_velocity(past, m_v), n)
        frames = range(t - m_f + 1, t + 1)
        rng = np.random.default_rng(_sample_seed(pre.seed, track.video_id, track.track_id, t))
        offset = crop_offset(pre, rng)
        flow = None
        if flow_source is not None:
            fields = [normalize(crop(resized_field(f), pre.crop_to, offset), pre.clip) for f in frames]
            flow = stack(fields).astype(dtype)
        samples.append(Sample(track.video_id, track.track_id, t, flow, past.copy(), cv, truth.copy(),
                              residual_target(truth, cv),
                              track.boxes[[f - track.start_frame for f in frames]].copy(), offset))
    return samples


def build_dataset(tracks: Iterable[Track], flow_source: FlowSource | None, cfg: ForecastConfig = ForecastConfig(),
                  pre: PreprocessConfig = PreprocessConfig(), **kwargs) -> list[Sample]:
    samples = [s for t in tracks for s in build_samples(t, flow_source, cfg, pre, **kwargs)]
    samples.sort(key=lambda s: s.key)
    return samples


@dataclass
class Batch:
    """Samples as stacked arrays, ready for the predictor."""

    flow: np.ndarray | None
    past: np.ndarray
    cv_pred: np.ndarray
    truth: np.ndarray
    target: np.ndarray
    keys: list = field(default_factory=list)

    def __len__(self):
        return len(self.cv_pred)

    def subset(self, idx) -> "Batch":
        idx = np.asarray(idx, dtype=np.intp)
        return Batch(None if self.flow is None else self.flow[idx], self.past[idx], self.cv_pred[idx],
                     self.truth[idx], self.target[idx], [self.keys[i] for i in idx])


def collate(samples: Sequence[Sample], dtype=None) -> Batch:
    if not samples:
        raise ValueError("cannot collate an empty sample list")
    flow = None
    if all(s.flow is not None for s in samples):
        flow = np.stack([s.flow for s in samples])
        if dtype is not None:
            flow = flow.astype(dtype)
    return Batch(flow, np.stack([s.past for s in samples]), np.stack([s.cv_pred for s in samples]),
                 np.stack([s.truth for s in samples]), np.stack([s.target for s in samples]),
                 [(s.video_id, s.track_id, s.anchor) for s in samples])


# splits

def video_number(video_id: str) -> int:
    m = re.search(r"(\d+)$", str(video_id))
    if m is None:
        raise UncoveredVideo(f"video id {video_id!r} has no trailing number")
    return int(m.group(1))


@dataclass(frozen=True)
class SplitSpec:
    """How videos are partitioned.

    ``rule="range"`` buckets by the video's trailing number using ``ranges``
    (e.g. ``"train:0-250,test:251-346"``). ``rule="fraction"`` holds out
    ``round(holdout * N)`` seeded-random videos as ``holdout_name``.
    ``rule="none"`` puts every video in ``train``. ``folds`` and
    ``val_fraction`` govern how the training videos are validated.
    """

    rule: str = "none"
    ranges: str = "train:0-250,test:251-346"
    holdout: float = 0.2
    holdout_name: str = "test"
    folds: int = 5
    val_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")
        if self.rule not in ("none", "range", "fraction"):
            raise ValueError(f"unknown split rule {self.rule!r}")
        if not 0.0 <= self.holdout < 1.0:
            raise ValueError("holdout must lie in [0, 1)")

    def parsed_ranges(self) -> list[tuple[str, int, int]]:
        out = []
        for part in self.ranges.split(","):
            name, _, span = part.strip().partition(":")
            lo, _, hi = span.partition("-")
            out.append((name.strip(), int(lo), int(hi or lo)))
        return out


def split_videos(videos: Iterable[str], spec: SplitSpec) -> dict[str, list[str]]:
    videos = sorted(set(videos), key=natural_key)
    if spec.rule == "none":
        return {"train": videos}
    if spec.rule == "range":
        ranges = spec.parsed_ranges()
        out: dict[str, list[str]] = {name: [] for name, _, _ in ranges}
        for v in videos:
            num = video_number(v)
            for name, lo, hi in ranges:
                if lo <= num <= hi:
                    out[name].append(v)
                    break
            else:
                raise UncoveredVideo(f"video {v!r} is not covered by {spec.ranges!r}")
        return out
    rng = np.random.default_rng(spec.seed)
    order = [videos[i] for i in rng.permutation(len(videos))]
    k = int(round(spec.holdout * len(videos)))
    held = set(order[:k])
    return {"train": [v for v in videos if v not in held],
            spec.holdout_name: [v for v in videos if v in held]}


def make_folds(videos: Iterable[str], k: int, seed: int = 0) -> list[tuple[list[str], list[str]]]:
    """K (train, validation) pairs; every video validates exactly once."""
    videos = sorted(set(videos), key=natural_key)
    if k < 2:
        raise ValueError("need at least 2 folds")
    if len(videos) < k:
        raise TooFewVideos(f"{len(videos)} videos cannot fill {k} folds")
    order = [videos[i] for i in np.random.default_rng(seed).permutation(len(videos))]
    folds = [sorted(order[i::k], key=natural_key) for i in range(k)]
    return [
        (sorted((v for j, f in enumerate(folds) if j != i for v in f), key=natural_key), folds[i])
        for i in range(k)
    ]


def select(samples: Iterable[Sample], videos: Iterable[str]) -> list[Sample]:
    keep = set(videos)
    return [s for s in samples if s.video_id in keep]


# manifests

@dataclass
class Manifest:
    forecast: ForecastConfig
    preprocess: PreprocessConfig
    source: str = "human"
    detector: str | None = None
    flow_dir: str | None = None
    samples: list[Sample] = field(default_factory=list)

    @property
    def videos(self) -> list[str]:
        return sorted({s.video_id for s in self.samples}, key=natural_key)


def _row(s: Sample, m_f: int) -> dict:
    frames = list(range(s.anchor - m_f + 1, s.anchor + 1))
    return {
        "video": s.video_id, "track": s.track_id, "t": s.anchor,
        "flow": [f"{s.video_id}/{f}.flo" for f in frames],
        "flow_boxes": s.flow_boxes.tolist() if s.flow_boxes is not None else None,
        "crop": list(s.crop),
        "past": s.past.tolist(), "cv": s.cv_pred.tolist(),
        "truth": s.truth.tolist(), "target": s.target.tolist(),
    }


def manifest_text(man: Manifest) -> str:
    header = {"header": {"forecast": asdict(man.forecast), "preprocess": asdict(man.preprocess),
                         "source": man.source, "detector": man.detector, "flow_dir": man.flow_dir}}
    rows = sorted(man.samples, key=lambda s: s.key)
    lines = [json.dumps(header, sort_keys=True)]
    lines += [json.dumps(_row(s, man.forecast.flow_stack), sort_keys=True) for s in rows]
    return "\n".join(lines) + "\n"


def read_manifest(path, flow_dir=None, load_flow: bool = True, dtype=np.float32) -> Manifest:
    """Read a manifest; with ``load_flow`` the flow stacks are rebuilt from ``.flo`` files."""
    path = Path(path)
    with open(path) as fh:
        rows = [json.loads(line) for line in fh if line.strip()]
    if not rows or "header" not in rows[0]:
        raise ValueError(f"{path} has no manifest header")
    head = rows[0]["header"]
    man = Manifest(ForecastConfig(**head["forecast"]), PreprocessConfig(**head["preprocess"]),
                   head.get("source", "human"), head.get("detector"), head.get("flow_dir"))
    if flow_dir is not None:
        root = Path(flow_dir)
    else:
        root = Path(man.flow_dir) if man.flow_dir else path.parent
        if not root.is_absolute():
            root = path.parent / root
    cache: dict[tuple, np.ndarray] = {}
    pre = man.preprocess
    for r in rows[1:]:
        flow = None
        boxes = np.asarray(r["flow_boxes"], dtype=np.float64) if r.get("flow_boxes") is not None else None
        if load_flow:
            fields = []
            for rel, box in zip(r["flow"], boxes):
                key = (rel, tuple(box), tuple(r["crop"]))
                if key not in cache:
                    raw = read_flo(root / rel)
                    region = square_region(box, raw.width, raw.height)
                    resized = resize_region(raw, region, pre.resize_to)
                    cache[key] = normalize(crop(resized, pre.crop_to, tuple(r["crop"])), pre.clip)
                fields.append(cache[key])
            flow = stack(fields).astype(dtype)
        man.samples.append(Sample(str(r["video"]), str(r["track"]), int(r["t"]), flow,
                                  np.asarray(r["past"]), np.asarray(r["cv"]), np.asarray(r["truth"]),
                                  np.asarray(r["target"]), boxes, tuple(r["crop"])))
    return man
