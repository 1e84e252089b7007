"""Machine annotation: link per-frame detections into tracks and filter them.

Association is greedy on IoU against each track's last box. Detections are
read from JSONL rows ``{video, frame, x1, y1, x2, y2, score, class}`` and
tracks written as ``{video, track, start_frame, boxes, source}``.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from itertools import groupby
from typing import Iterable

import numpy as np

from trajforecast.kinematics import BoundingBox, Source, Track


class UnsortedInput(ValueError):
    pass


@dataclass(frozen=True)
class Detection:
    video_id: str
    frame: int
    box: BoundingBox
    score: float = 1.0
    label: str = "pedestrian"

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")


@dataclass(frozen=True)
class TrackerConfig:
    min_score: float = 0.6
    iou_threshold: float = 0.3
    max_age: int = 1
    classes: tuple[str, ...] = ("pedestrian", "person")

    def __post_init__(self):
        if not 0.0 <= self.min_score <= 1.0 or not 0.0 <= self.iou_threshold <= 1.0:
            raise ValueError("min_score and iou_threshold must lie in [0, 1]")
        if self.max_age < 1:
            raise ValueError("max_age must be >= 1")


@dataclass(frozen=True)
class FilterConfig:
    min_height: float = 50.0
    min_length: int = 25

    def __post_init__(self):
        if self.min_height < 0 or self.min_length < 0:
            raise ValueError("filter thresholds must be nonnegative")


def iou(a, b) -> float:
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    if union <= 0:
        return 0.0
    return inter / union


@dataclass
class Tracklet:
    """A track still being extended by the tracker."""

    track_id: str
    start_frame: int
    boxes: list = field(default_factory=list)
    misses: int = 0

    @property
    def last_box(self):
        return self.boxes[-1]

    @property
    def last_frame(self) -> int:
        return self.start_frame + len(self.boxes) - 1

    def extend(self, frame: int, box) -> None:
        gap = frame - self.last_frame
        if gap > 1:
            # bridge frames missed within max_age so the track stays consecutive
            a, b = np.asarray(self.last_box), np.asarray(box)
            for j in range(1, gap):
                self.boxes.append(tuple(a + (b - a) * (j / gap)))
        self.boxes.append(tuple(box))
        self.misses = 0


@dataclass
class Association:
    matches: list[tuple[int, int]]
    unmatched_detections: list[int]
    terminated: list[int]


def associate_frame(active: list[Tracklet], detections: list, cfg: TrackerConfig) -> Association:
    """Match detections to active tracks greedily by descending IoU.

    ``detections`` are boxes (or :class:`Detection`) already filtered by score.
    Unmatched tracks have their miss counter advanced; those reaching
    ``max_age`` are reported as terminated. Indices refer to the inputs.
    """
    boxes = [d.box if isinstance(d, Detection) else d for d in detections]
    pairs = []
    for ti, trk in enumerate(active):
        for di, box in enumerate(boxes):
            score = iou(trk.last_box, box)
            if score >= cfg.iou_threshold and score > 0.0:
                pairs.append((-score, ti, di))
    pairs.sort()
    used_t, used_d, matches = set(), set(), []
    for _, ti, di in pairs:
        if ti in used_t or di in used_d:
            continue
        used_t.add(ti)
        used_d.add(di)
        matches.append((ti, di))
    terminated = []
    for ti, trk in enumerate(active):
        if ti not in used_t:
            trk.misses += 1
            if trk.misses >= cfg.max_age:
                terminated.append(ti)
    unmatched = [di for di in range(len(boxes)) if di not in used_d]
    return Association(sorted(matches), unmatched, terminated)


def run_tracker(detections: Iterable[Detection], cfg: TrackerConfig = TrackerConfig(),
                detector: str | None = None) -> list[Track]:
    """Track one video's detections; frames must be non-decreasing."""
    dets = [d for d in detections]
    if not dets:
        return []
    video_ids = {d.video_id for d in dets}
    if len(video_ids) != 1:
        raise ValueError(f"run_tracker expects one video, got {sorted(video_ids)}")
    video_id = dets[0].video_id
    for prev, cur in zip(dets, dets[1:]):
        if cur.frame < prev.frame:
            raise UnsortedInput(f"video {video_id}: frame {cur.frame} after {prev.frame}")
    keep = [d for d in dets if d.score >= cfg.min_score and d.label in cfg.classes]
    by_frame = {f: list(g) for f, g in groupby(keep, key=lambda d: d.frame)}

    active: list[Tracklet] = []
    finished: list[Tracklet] = []
    next_id = 0
    for frame in range(dets[0].frame, dets[-1].frame + 1):
        frame_dets = by_frame.get(frame, [])
        assoc = associate_frame(active, frame_dets, cfg)
        for ti, di in assoc.matches:
            active[ti].extend(frame, frame_dets[di].box)
        dead = set(assoc.terminated)
        finished.extend(active[i] for i in assoc.terminated)
        active = [t for i, t in enumerate(active) if i not in dead]
        for di in assoc.unmatched_detections:
            active.append(Tracklet(str(next_id), frame, [tuple(frame_dets[di].box)]))
            next_id += 1
    finished.extend(active)
    finished.sort(key=lambda t: int(t.track_id))
    return [
        Track(t.track_id, video_id, t.start_frame, np.array(t.boxes), Source.MACHINE, detector)
        for t in finished
    ]


def track_stream(detections: Iterable[Detection], cfg: TrackerConfig = TrackerConfig(),
                 detector: str | None = None) -> list[Track]:
    """Run the tracker per video over a stream grouped by video."""
    tracks: list[Track] = []
    seen = set()
    for video_id, group in groupby(detections, key=lambda d: d.video_id):
        if video_id in seen:
            raise UnsortedInput(f"detections for video {video_id} are not contiguous")
        seen.add(video_id)
        tracks.extend(run_tracker(group, cfg, detector))
    return tracks


def filter_tracks(tracks: Iterable[Track], cfg: FilterConfig = FilterConfig()) -> list[Track]:
    """Keep tracks at least ``min_length`` long whose every box is ``min_height`` tall."""
    return [
        t for t in tracks
        if len(t) >= cfg.min_length and bool(np.all(t.heights >= cfg.min_height))
    ]


def downsample_detections(detections: Iterable[Detection], step: int = 2) -> list[Detection]:
    """Keep every ``step``-th frame and renumber frames (30 fps -> 15 fps for step 2)."""
    if step < 1:
        raise ValueError("step must be >= 1")
    return [
        Detection(d.video_id, d.frame // step, d.box, d.score, d.label)
        for d in detections if d.frame % step == 0
    ]


def natural_key(s: str):
    return [int(p) if p.isdigit() else p for p in re.split(r"(\d+)", str(s))]


# JSONL

def detection_from_json(row: dict) -> Detection:
    box = BoundingBox(row["x1"], row["y1"], row["x2"], row["y2"])
    return Detection(str(row["video"]), int(row["frame"]), box, float(row.get("score", 1.0)),
                     str(row.get("class", "pedestrian")))


def detection_to_json(d: Detection) -> dict:
    x1, y1, x2, y2 = d.box
    return {"video": d.video_id, "frame": d.frame, "x1": x1, "y1": y1, "x2": x2, "y2": y2,
            "score": d.score, "class": d.label}


def track_to_json(t: Track) -> dict:
    row = {"video": t.video_id, "track": t.track_id, "start_frame": t.start_frame,
           "boxes": [[float(c) for c in b] for b in t.boxes], "source": t.source.value}
    if t.detector is not None:
        row["detector"] = t.detector
    return row


def track_from_json(row: dict) -> Track:
    return Track(str(row["track"]), str(row["video"]), int(row["start_frame"]),
                 np.asarray(row["boxes"], dtype=np.float64), Source(row.get("source", "human")),
                 row.get("detector"))


def read_jsonl(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def lines_jsonl(rows: Iterable[dict]) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows)


def read_detections(path) -> list[Detection]:
    return [detection_from_json(r) for r in read_jsonl(path)]


def read_tracks(path) -> list[Track]:
    return [track_from_json(r) for r in read_jsonl(path)]
