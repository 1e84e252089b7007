"""Experiment lifecycle: synth -> annotate -> build -> (pre)train/finetune -> eval.

Each step reads and writes files so steps can be chained from the command
line; every writer is atomic.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from trajforecast.annotate import (
    detection_to_json, downsample_detections, filter_tracks, lines_jsonl, read_detections, read_tracks,
    track_stream, track_to_json,
)
from trajforecast.config import ExperimentConfig
from trajforecast.dataset import (
    DirectoryFlowSource, Manifest, SplitSpec, build_dataset, collate, make_folds, manifest_text, read_manifest, select,
    split_videos,
)
from trajforecast.flow import flo_path, write_flo
from trajforecast.io import atomic_write_text
from trajforecast.kinematics import ca_forecast
from trajforecast.metrics import EvalReport
from trajforecast.model import ModelParams, NetSpec, load_params, predict_locations, save_params
from trajforecast.synth import corrupt_detections, desk_suite, gen_scenario, render_flow
from trajforecast.train import AdamConfig, EmptyManifest, TrainConfig, TrainResult, train

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "TRAJFORECAST_OUTPUT_ROOT"


class CheckpointMismatch(ValueError):
    pass


def output_path(path) -> Path:
    """Relative output paths resolve under ``$TRAJFORECAST_OUTPUT_ROOT`` when set."""
    path = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not path.is_absolute():
        return Path(root) / path
    return path


def write_resolved_config(cfg: ExperimentConfig, out_dir: Path, name: str = "config.resolved.ini") -> None:
    atomic_write_text(Path(out_dir) / name, cfg.to_ini())


# data generation and annotation

def synthesize(cfg: ExperimentConfig, out_dir) -> dict:
    """Write ``tracks.jsonl`` (ground truth), ``detections.jsonl`` and ``flow/`` for a synthetic set."""
    out_dir = Path(out_dir)
    sc = cfg.synth
    specs = desk_suite(sc.n_videos, kinds=sc.kinds, seed=sc.seed, flow_stack=cfg.forecast.flow_stack,
                       horizon=cfg.forecast.horizon, velocity_window=cfg.forecast.velocity_window,
                       flow_noise=sc.flow_noise, speed=(sc.speed_min, sc.speed_max),
                       frame_size=(sc.frame_width, sc.frame_height), video_prefix=sc.video_prefix,
                       extra_frames=sc.extra_frames)
    tracks, dets = [], []
    for spec in specs:
        track, _ = gen_scenario(spec)
        tracks.append(track)
        dets.extend(corrupt_detections(track, sc.drop_rate, sc.jitter, seed=sc.seed))
        for frame in track.frames:
            write_flo(flo_path(out_dir / "flow", track.video_id, frame), render_flow(track, int(frame), spec))
    atomic_write_text(out_dir / "tracks.jsonl", lines_jsonl(track_to_json(t) for t in tracks))
    atomic_write_text(out_dir / "detections.jsonl", lines_jsonl(detection_to_json(d) for d in dets))
    return {"videos": len(specs), "tracks": len(tracks), "detections": len(dets)}


def annotate(cfg: ExperimentConfig, detections_path, out_path, detector: str | None = None) -> dict:
    dets = read_detections(detections_path)
    if cfg.dataset.frame_step > 1:
        dets = downsample_detections(dets, cfg.dataset.frame_step)
    raw = track_stream(dets, cfg.tracker, detector)
    kept = filter_tracks(raw, cfg.filter)
    atomic_write_text(out_path, lines_jsonl(track_to_json(t) for t in kept))
    return {"detections": len(dets), "tracks": len(raw), "kept": len(kept)}


def build_manifest(cfg: ExperimentConfig, tracks_path, flow_dir, out_path) -> Manifest:
    tracks = read_tracks(tracks_path)
    sources = {t.source.value for t in tracks}
    detectors = {t.detector for t in tracks if t.detector}
    samples = build_dataset(tracks, DirectoryFlowSource(flow_dir), cfg.forecast, cfg.preprocess,
                            stride=cfg.dataset.stride, min_history=cfg.dataset.min_history or None)
    out_path = Path(out_path)
    rel = os.path.relpath(Path(flow_dir).resolve(), out_path.resolve().parent)
    man = Manifest(cfg.forecast, cfg.preprocess, "/".join(sorted(sources)) or "human",
                   ",".join(sorted(detectors)) or None, rel, samples)
    atomic_write_text(out_path, manifest_text(man))
    return man


def load_manifest(path, cfg: ExperimentConfig) -> Manifest:
    return read_manifest(path, dtype=np.float32 if cfg.net.precision == 32 else np.float64)


def manifest_spec(cfg: ExperimentConfig, man: Manifest) -> NetSpec:
    return cfg.net_spec(2 * man.forecast.flow_stack, man.preprocess.crop_to, man.forecast.horizon)


def partition(cfg: ExperimentConfig, videos) -> tuple[list[str], list[str]]:
    """(train-pool videos, test videos) under the configured split rule."""
    buckets = split_videos(videos, cfg.split)
    if cfg.split.rule == "none":
        return buckets["train"], []
    test_name = "test" if cfg.split.rule == "range" else cfg.split.holdout_name
    return buckets.get("train", []), buckets.get(test_name, [])


def validation_pairs(cfg: ExperimentConfig, videos) -> list[tuple[list[str], list[str]]]:
    if cfg.split.folds >= 2:
        return make_folds(videos, cfg.split.folds, cfg.split.seed)
    buckets = split_videos(videos, _fraction_split(cfg.split.val_fraction, cfg.split.seed))
    return [(buckets["train"], buckets["val"])]


def _fraction_split(fraction: float, seed: int) -> SplitSpec:
    return SplitSpec(rule="fraction", holdout=fraction, holdout_name="val", seed=seed)


# training

@dataclass
class FitOutcome:
    name: str
    result: TrainResult
    train_videos: list[str]
    val_videos: list[str]


def _fit(cfg: ExperimentConfig, man: Manifest, train_videos, val_videos, out_dir: Path, name: str,
         init: ModelParams | None = None, adam: AdamConfig | None = None,
         tcfg: TrainConfig | None = None) -> FitOutcome:
    spec = manifest_spec(cfg, man)
    tr = select(man.samples, train_videos)
    va = select(man.samples, val_videos)
    if not tr:
        raise EmptyManifest(f"{name}: no training samples")
    result = train(collate(tr), spec, adam or cfg.optim, tcfg or cfg.train,
                   val=collate(va) if va else None, init=init, label=name)
    save_params(out_dir / f"{name}.ckpt", result.params)
    atomic_write_text(out_dir / f"{name}_history.csv", result.history_csv())
    log.info("%s: %d train / %d val samples, %d steps, best epoch %d", name, len(tr), len(va),
             result.steps, result.best_epoch)
    return FitOutcome(name, result, list(train_videos), list(val_videos))


def _write_summary(out_dir: Path, outcomes: list[FitOutcome], extra: dict | None = None) -> None:
    rows = []
    for o in outcomes:
        tr = o.result.losses("train")
        rows.append({"name": o.name, "steps": o.result.steps, "best_epoch": o.result.best_epoch,
                     "initial_train_loss": tr[0], "final_train_loss": tr[-1],
                     "best_train_loss": tr[o.result.best_epoch],
                     "train_videos": len(o.train_videos), "val_videos": len(o.val_videos)})
    body = {"runs": rows, **(extra or {})}
    atomic_write_text(out_dir / "summary.json", json.dumps(body, indent=2, sort_keys=True) + "\n")


def train_folds(cfg: ExperimentConfig, manifest_path, out_dir, init: ModelParams | None = None,
                adam: AdamConfig | None = None, tcfg: TrainConfig | None = None,
                prefix: str = "fold") -> list[FitOutcome]:
    """One model per validation fold of the non-test videos."""
    out_dir = Path(out_dir)
    man = load_manifest(manifest_path, cfg)
    pool, _ = partition(cfg, man.videos)
    outcomes = []
    for i, (tr, va) in enumerate(validation_pairs(cfg, pool)):
        name = f"{prefix}{i}" if cfg.split.folds >= 2 else prefix
        outcomes.append(_fit(cfg, man, tr, va, out_dir, name, init, adam, tcfg))
    _write_summary(out_dir, outcomes)
    write_resolved_config(cfg, out_dir)
    return outcomes


def pretrain(cfg: ExperimentConfig, manifest_path, out_dir, fraction: float | None = None) -> FitOutcome:
    """Train on a seeded ``fraction`` of machine-annotated training videos (80/20 validation)."""
    out_dir = Path(out_dir)
    fraction = cfg.pretrain.fraction if fraction is None else fraction
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"pretrain fraction {fraction} outside (0, 1]")
    man = load_manifest(manifest_path, cfg)
    pool, _ = partition(cfg, man.videos)
    buckets = split_videos(pool, _fraction_split(cfg.split.val_fraction, cfg.split.seed))
    train_v = buckets["train"]
    k = max(1, math.ceil(fraction * len(train_v)))
    rng = np.random.default_rng([cfg.split.seed, 1])
    chosen = sorted((train_v[i] for i in rng.permutation(len(train_v))[:k]), key=train_v.index)
    outcome = _fit(cfg, man, chosen, buckets["val"], out_dir, "pretrain")
    _write_summary(out_dir, [outcome], {"fraction": fraction, "source": man.source, "detector": man.detector})
    write_resolved_config(cfg, out_dir)
    return outcome


def check_checkpoint(params: ModelParams, spec: NetSpec) -> None:
    if params.spec != spec:
        raise CheckpointMismatch(f"checkpoint NetSpec {params.spec} differs from configured {spec}")


def finetune(cfg: ExperimentConfig, manifest_path, checkpoint, out_dir) -> list[FitOutcome]:
    """Resume from ``checkpoint`` on (usually human-annotated) data, per fold."""
    man = load_manifest(manifest_path, cfg)
    params = load_params(checkpoint)
    check_checkpoint(params, manifest_spec(cfg, man))
    ft = cfg.finetune
    adam = AdamConfig(**{**cfg.optim.__dict__,
                         **({"lr": ft.lr} if ft.lr else {}),
                         **({"lr_reduced": ft.lr_reduced} if ft.lr_reduced else {})})
    tcfg = TrainConfig(**{**cfg.train.__dict__, **({"max_epochs": ft.max_epochs} if ft.max_epochs else {})})
    return train_folds(cfg, manifest_path, out_dir, init=params, adam=adam, tcfg=tcfg, prefix="finetune")


# evaluation

def evaluate(cfg: ExperimentConfig, manifest_path, checkpoints, out_dir=None,
             man: Manifest | None = None) -> EvalReport:
    """CV, CA, and per-checkpoint model metrics on the test videos.

    Baseline rows are repeated once per checkpoint so every model carries the
    same fold count.
    """
    man = man or load_manifest(manifest_path, cfg)
    _, test = partition(cfg, man.videos)
    samples = select(man.samples, test) if test else man.samples
    if not samples:
        raise ValueError("no evaluation samples")
    batch = collate(samples)
    spec = manifest_spec(cfg, man)
    models = [load_params(c) if not isinstance(c, ModelParams) else c for c in checkpoints]
    for p in models:
        check_checkpoint(p, spec)
    folds = max(1, len(models))
    ca = np.stack([ca_forecast(p, man.forecast.horizon, man.forecast.velocity_window) for p in batch.past])
    report = EvalReport(man.forecast.horizon)
    pc = cfg.eval.per_coordinate
    for _ in range(folds):
        report.add("CV", batch.cv_pred, batch.truth, pc)
    for _ in range(folds):
        report.add("CA", ca, batch.truth, pc)
    for p in models:
        report.add("model", predict_locations(p, batch.flow, batch.cv_pred), batch.truth, pc)
    if out_dir is not None:
        out_dir = Path(out_dir)
        atomic_write_text(out_dir / "report.csv", report.to_csv())
        atomic_write_text(out_dir / "report.json", report.to_json())
        write_resolved_config(cfg, out_dir)
    return report


def fraction_sweep(cfg: ExperimentConfig, machine_manifest, human_manifest, out_dir,
                   fractions=(0.2, 0.4, 0.6, 0.8, 1.0)) -> str:
    """Pre-train on growing subsets, fine-tune per fold, and tabulate test MSE with 95% CI."""
    out_dir = Path(out_dir)
    lines = ["fraction,mse_mean,mse_ci95,mse_lower,mse_upper"]
    for frac in fractions:
        sub = out_dir / f"fraction_{frac:.2f}"
        pre = pretrain(cfg, machine_manifest, sub / "pretrain", frac)
        outs = finetune(cfg, human_manifest, sub / "pretrain" / "pretrain.ckpt", sub / "finetune")
        report = evaluate(cfg, human_manifest, [o.result.params for o in outs], sub / "eval")
        mean, hw = report.summary("model", "MSE")
        hw = hw if hw is not None else 0.0
        lines.append(f"{frac:.2f},{mean!r},{hw!r},{mean - hw!r},{mean + hw!r}")
        log.info("fraction %.2f: pretrain best epoch %d, MSE %.3f ± %.3f", frac, pre.result.best_epoch, mean, hw)
    text = "\n".join(lines) + "\n"
    atomic_write_text(out_dir / "fraction_vs_mse.csv", text)
    return text

