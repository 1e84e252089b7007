"""Synthetic scenarios with known kinematics, flow, and detector noise.

Every generator is a pure function of its spec and seed, so the outputs can
serve as exact oracles for the kinematic baselines, the tracker, and the
learned predictor.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, replace

import numpy as np

from trajforecast.annotate import Detection
from trajforecast.flow import FlowField
from trajforecast.kinematics import BoundingBox, Source, Track

KINDS = ("constant_velocity", "constant_acceleration", "start_walk", "stop", "ego_turn")


@dataclass(frozen=True)
class ScenarioSpec:
    """One pedestrian moving under a named motion model.

    ``velocity`` and ``accel`` are per-frame; ``change_frame`` is where
    ``start_walk`` begins moving, ``stop`` halts, and ``ego_turn`` starts its
    camera-rotation ramp of ``ego_rate`` px/frame². ``noise`` jitters the
    box positions, ``flow_noise`` the in-box flow.
    """

    kind: str = "constant_velocity"
    duration: int = 40
    box: tuple[float, float, float, float] = (100.0, 60.0, 130.0, 120.0)
    velocity: tuple[float, float] = (2.0, 0.0)
    accel: tuple[float, float] = (0.0, 0.0)
    change_frame: int = 10
    ego_rate: float = 0.0
    noise: float = 0.0
    flow_noise: float = 0.0
    frame_size: tuple[int, int] = (320, 180)
    seed: int = 0
    video_id: str = "synth_0"
    track_id: str = "0"
    start_frame: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown scenario kind {self.kind!r}")
        if self.duration < 1:
            raise ValueError("duration must be >= 1")
        if self.noise < 0 or self.flow_noise < 0:
            raise ValueError("noise levels must be nonnegative")


def _mix(seed: int, *parts) -> list[int]:
    return [int(seed)] + [zlib.crc32(str(p).encode()) for p in parts]


def ego_displacement(spec: ScenarioSpec, j) -> np.ndarray:
    """Camera-induced image displacement (x only) between local frames j-1 and j."""
    j = np.asarray(j, dtype=np.float64)
    if spec.kind != "ego_turn":
        return np.zeros_like(j)
    return spec.ego_rate * np.maximum(0.0, j - spec.change_frame)


def _path(spec: ScenarioSpec, j: np.ndarray) -> np.ndarray:
    j = np.asarray(j, dtype=np.float64)[:, None]
    c0 = np.array([(spec.box[0] + spec.box[2]) / 2, (spec.box[1] + spec.box[3]) / 2])
    v = np.asarray(spec.velocity, dtype=np.float64)
    s = spec.change_frame
    if spec.kind == "constant_velocity":
        return c0 + v * j
    if spec.kind == "constant_acceleration":
        return c0 + v * j + 0.5 * np.asarray(spec.accel, dtype=np.float64) * j * j
    if spec.kind == "start_walk":
        return c0 + v * np.maximum(0.0, j - s)
    if spec.kind == "stop":
        return c0 + v * np.minimum(j, s)
    # ego_turn: running sum of the ramped camera displacement
    ramp = np.maximum(0.0, j[:, 0] - s)
    path = c0 + v * j
    path[:, 0] += spec.ego_rate * ramp * (ramp + 1) / 2
    return path


def true_centroids(spec: ScenarioSpec) -> np.ndarray:
    """Noise-free centroid path, one row per local frame ``0 .. duration-1``."""
    return _path(spec, np.arange(spec.duration))


def true_velocities(spec: ScenarioSpec) -> np.ndarray:
    """Displacement from local frame j-1 to j for every frame of the scenario."""
    j = np.arange(spec.duration)
    return _path(spec, j) - _path(spec, j - 1)


def gen_scenario(spec: ScenarioSpec) -> tuple[Track, np.ndarray]:
    """Track of boxes following the scenario's kinematics, plus true per-frame velocity."""
    path = true_centroids(spec)
    if spec.noise > 0:
        rng = np.random.default_rng(_mix(spec.seed, "boxes", spec.video_id, spec.track_id))
        path = path + rng.normal(0.0, spec.noise, size=path.shape)
    hw = (spec.box[2] - spec.box[0]) / 2
    hh = (spec.box[3] - spec.box[1]) / 2
    boxes = np.column_stack([path[:, 0] - hw, path[:, 1] - hh, path[:, 0] + hw, path[:, 1] + hh])
    track = Track(spec.track_id, spec.video_id, spec.start_frame, boxes, Source.HUMAN)
    return track, true_velocities(spec)


def render_flow(track: Track, frame: int, spec: ScenarioSpec) -> FlowField:
    """Piecewise-constant flow for ``frame``: pedestrian motion in the box, ego motion elsewhere."""
    j = frame - track.start_frame
    if not 0 <= j < len(track):
        raise ValueError(f"frame {frame} outside track {track.video_id}/{track.track_id}")
    width, height = spec.frame_size
    disp = true_velocities(spec)[j]
    data = np.zeros((height, width, 2), dtype=np.float32)
    data[..., 0] = ego_displacement(spec, j)
    x1, y1, x2, y2 = track.boxes[j]
    # pixels whose centers fall inside the box
    c0, c1 = max(int(np.ceil(x1 - 0.5)), 0), min(int(np.floor(x2 - 0.5)) + 1, width)
    r0, r1 = max(int(np.ceil(y1 - 0.5)), 0), min(int(np.floor(y2 - 0.5)) + 1, height)
    if c1 > c0 and r1 > r0:
        patch = np.broadcast_to(disp, (r1 - r0, c1 - c0, 2)).astype(np.float64)
        if spec.flow_noise > 0:
            rng = np.random.default_rng(_mix(spec.seed, "flow", spec.video_id, spec.track_id, frame))
            patch = patch + rng.normal(0.0, spec.flow_noise, size=patch.shape)
        data[r0:r1, c0:c1] = patch
    return FlowField(data)


def corrupt_detections(track: Track, drop_rate: float = 0.0, jitter: float = 0.0, seed: int = 0,
                       score_floor: float = 0.7, label: str = "pedestrian") -> list[Detection]:
    """Detector-like stream from a track: jittered boxes, random misses, scores >= floor."""
    if not 0.0 <= drop_rate <= 1.0 or not 0.0 <= score_floor <= 1.0:
        raise ValueError("drop_rate and score_floor must lie in [0, 1]")
    if jitter < 0:
        raise ValueError("jitter must be nonnegative")
    rng = np.random.default_rng(_mix(seed, "detect", track.video_id, track.track_id))
    n = len(track)
    keep = rng.random(n) >= drop_rate
    offsets = rng.normal(0.0, jitter, size=(n, 4)) if jitter > 0 else np.zeros((n, 4))
    scores = rng.uniform(score_floor, 1.0, size=n)
    out = []
    for j in np.flatnonzero(keep):
        x1, y1, x2, y2 = track.boxes[j] + offsets[j]
        box = BoundingBox(min(x1, x2), min(y1, y2), max(x1, x2), max(y1, y2))
        out.append(Detection(track.video_id, track.start_frame + int(j), box, float(scores[j]), label))
    return out


def merge_streams(*streams: list[Detection]) -> list[Detection]:
    """Interleave detection streams by (video, frame), stable within a frame."""
    rows = [d for s in streams for d in s]
    return sorted(rows, key=lambda d: (d.video_id, d.frame))


class SynthFlowSource:
    """Flow lookup ``(video_id, frame) -> FlowField`` rendered on demand."""

    def __init__(self, specs):
        self._items = {}
        for spec in specs:
            track, _ = gen_scenario(spec)
            self._items[spec.video_id] = (track, spec)

    def __call__(self, video_id: str, frame: int) -> FlowField:
        track, spec = self._items[video_id]
        return render_flow(track, frame, spec)


def desk_suite(n: int, kinds=("start_walk", "stop"), seed: int = 0, *, flow_stack: int = 9,
               horizon: int = 15, velocity_window: int = 4, flow_noise: float = 0.25,
               speed=(2.0, 5.0), frame_size=(320, 180), video_prefix: str = "synth",
               extra_frames: int = 2) -> list[ScenarioSpec]:
    """Random scenarios whose motion change is visible before every sample anchor.

    Each scenario is just long enough for ``extra_frames + 1`` anchors, and
    the change frame falls inside the velocity window of the first anchor,
    so past flow always carries evidence of the change.
    """
    rng = np.random.default_rng(_mix(seed, "suite"))
    history = max(flow_stack, velocity_window)
    duration = history + horizon + 1 + extra_frames
    width, height = frame_size
    specs = []
    for i in range(n):
        kind = kinds[i % len(kinds)]
        speed_x = rng.uniform(*speed) * rng.choice([-1.0, 1.0])
        vel = (float(speed_x), float(rng.uniform(-0.5, 0.5)))
        change = int(rng.integers(history - velocity_window + 1, history))
        bw, bh = float(rng.uniform(26, 34)), float(rng.uniform(56, 68))
        travel = abs(speed_x) * duration
        cx = width / 2 - np.sign(speed_x) * travel / 2 + rng.uniform(-10, 10)
        cy = height / 2 + rng.uniform(-10, 10)
        box = (cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2)
        specs.append(ScenarioSpec(kind=kind, duration=duration, box=box, velocity=vel,
                                  change_frame=change, flow_noise=flow_noise,
                                  frame_size=tuple(frame_size), seed=seed + i,
                                  video_id=f"{video_prefix}_{i:04d}", track_id="0"))
    return specs


def with_seed(spec: ScenarioSpec, seed: int) -> ScenarioSpec:
    return replace(spec, seed=seed)
