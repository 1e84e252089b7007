"""Track data model and closed-form kinematic forecasts.

Coordinates are continuous pixels with the origin at the top-left corner,
x to the right and y downward. Sequences of centroids are ``(k, 2)`` float
arrays ordered in time.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np


class InsufficientHistory(ValueError):
    pass


class LengthMismatch(ValueError):
    pass


class Centroid(NamedTuple):
    x: float
    y: float


class Velocity(NamedTuple):
    vx: float
    vy: float


class _Box(NamedTuple):
    x1: float
    y1: float
    x2: float
    y2: float


class BoundingBox(_Box):
    __slots__ = ()

    def __new__(cls, x1, y1, x2, y2):
        x1, y1, x2, y2 = float(x1), float(y1), float(x2), float(y2)
        if not (x1 <= x2 and y1 <= y2):
            raise ValueError(f"malformed box ({x1}, {y1}, {x2}, {y2})")
        return super().__new__(cls, x1, y1, x2, y2)

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height


class Source(str, enum.Enum):
    HUMAN = "human"
    MACHINE = "machine"


@dataclass
class Track:
    """One pedestrian's boxes over a contiguous range of frames.

    ``boxes`` is an ``(L, 4)`` array of ``x1, y1, x2, y2`` rows, one per
    frame starting at ``start_frame``.
    """

    track_id: str
    video_id: str
    start_frame: int
    boxes: np.ndarray
    source: Source = Source.HUMAN
    detector: str | None = field(default=None, compare=False)

    def __post_init__(self):
        self.track_id = str(self.track_id)
        self.video_id = str(self.video_id)
        self.start_frame = int(self.start_frame)
        self.source = Source(self.source)
        boxes = np.asarray(self.boxes, dtype=np.float64)
        if boxes.ndim != 2 or boxes.shape[1] != 4 or len(boxes) == 0:
            raise ValueError("track boxes must be a non-empty (L, 4) array")
        if np.any(boxes[:, 2] < boxes[:, 0]) or np.any(boxes[:, 3] < boxes[:, 1]):
            raise ValueError(f"track {self.video_id}/{self.track_id} has a malformed box")
        self.boxes = boxes

    def __len__(self) -> int:
        return len(self.boxes)

    @property
    def end_frame(self) -> int:
        return self.start_frame + len(self.boxes) - 1

    @property
    def frames(self) -> np.ndarray:
        return np.arange(self.start_frame, self.end_frame + 1)

    @property
    def heights(self) -> np.ndarray:
        return self.boxes[:, 3] - self.boxes[:, 1]

    def centroids(self) -> np.ndarray:
        return np.column_stack(
            [(self.boxes[:, 0] + self.boxes[:, 2]) / 2, (self.boxes[:, 1] + self.boxes[:, 3]) / 2]
        )

    def box(self, frame: int) -> BoundingBox:
        return BoundingBox(*self.boxes[frame - self.start_frame])


@dataclass(frozen=True)
class ForecastConfig:
    velocity_window: int = 4
    horizon: int = 15
    flow_stack: int = 9

    def __post_init__(self):
        for name in ("velocity_window", "horizon", "flow_stack"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


def centroid_of_box(box) -> Centroid:
    x1, y1, x2, y2 = box
    return Centroid((x1 + x2) / 2, (y1 + y2) / 2)


def _window(centroids, m: int) -> np.ndarray:
    pts = np.asarray(centroids, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError("centroids must be a (k, 2) array")
    if m < 1:
        raise ValueError("window must be >= 1")
    if len(pts) < m + 1:
        raise InsufficientHistory(f"need {m + 1} centroids, got {len(pts)}")
    return pts[-(m + 1):]


def estimate_velocity(centroids, m: int) -> Velocity:
    """Average velocity over the last ``m`` frames from the window endpoints."""
    w = _window(centroids, m)
    vx, vy = (w[-1] - w[0]) / m
    return Velocity(float(vx), float(vy))


def cv_forecast(last, velocity, n: int) -> np.ndarray:
    """Positions at ``t+1 .. t+n`` assuming ``velocity`` is held."""
    k = np.arange(1, n + 1, dtype=np.float64)[:, None]
    return np.asarray(last, dtype=np.float64) + np.asarray(velocity, dtype=np.float64) * k


def ca_forecast(centroids, n: int, m: int = 4) -> np.ndarray:
    """Positions at ``t+1 .. t+n`` assuming the average acceleration is held.

    The acceleration is the mean of consecutive per-frame velocity changes in
    the last ``m`` frames. The average velocity is dated to the middle of the
    window, so it is advanced by ``a * m / 2`` to get the velocity at ``t``.
    This makes the forecast exact for any quadratic trajectory and identical
    to :func:`cv_forecast` whenever the estimated acceleration is zero.
    """
    w = _window(centroids, m)
    steps = np.diff(w, axis=0)
    accel = np.diff(steps, axis=0).mean(axis=0) if m >= 2 else np.zeros(2)
    v_mean = (w[-1] - w[0]) / m
    v_now = v_mean + accel * (m / 2)
    k = np.arange(1, n + 1, dtype=np.float64)[:, None]
    return cv_forecast(w[-1], v_now, n) + 0.5 * accel * k * k


def residual_target(truth, cv) -> np.ndarray:
    """Signed correction that turns the CV forecast into the truth."""
    truth = np.asarray(truth, dtype=np.float64)
    cv = np.asarray(cv, dtype=np.float64)
    if truth.shape != cv.shape:
        raise LengthMismatch(f"truth {truth.shape} vs forecast {cv.shape}")
    return truth - cv


def recover_locations(cv, correction) -> np.ndarray:
    cv = np.asarray(cv, dtype=np.float64)
    correction = np.asarray(correction, dtype=np.float64)
    if cv.shape != correction.shape:
        raise LengthMismatch(f"forecast {cv.shape} vs correction {correction.shape}")
    return cv + correction
