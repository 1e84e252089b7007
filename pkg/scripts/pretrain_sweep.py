"""Pre-train on growing fractions of machine-annotated data, fine-tune on human tracks.

Runs the whole file-based pipeline: synthesize a "machine" set (detections
passed through the tracker) and a "human" set (ground-truth tracks), build
both manifests, then sweep the pre-training fraction. The result is
``fraction_vs_mse.csv`` with 95% CI bounds, ready for plotting.

    python3 scripts/pretrain_sweep.py --config configs/desk.ini --out sweep
"""

from __future__ import annotations

import argparse
import logging
from pathlib import Path

from trajforecast.config import load_config, replace_section
from trajforecast.experiment import annotate, build_manifest, fraction_sweep, output_path, synthesize


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config")
    p.add_argument("--out", default="sweep")
    p.add_argument("--machine-videos", type=int, default=60)
    p.add_argument("--human-videos", type=int, default=30)
    p.add_argument("--drop-rate", type=float, default=0.0)
    p.add_argument("--jitter", type=float, default=0.0)
    p.add_argument("--fractions", type=float, nargs="+", default=[0.2, 0.4, 0.6, 0.8, 1.0])
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")

    cfg = load_config(args.config)
    out = output_path(args.out)
    machine, human = out / "machine", out / "human"

    mcfg = replace_section(cfg, "synth", n_videos=args.machine_videos, video_prefix="machine",
                           seed=cfg.synth.seed + 1, drop_rate=args.drop_rate, jitter=args.jitter)
    synthesize(mcfg, machine)
    annotate(cfg, machine / "detections.jsonl", machine / "machine_tracks.jsonl", detector="synthetic")
    build_manifest(cfg, machine / "machine_tracks.jsonl", machine / "flow", machine / "manifest.jsonl")

    hcfg = replace_section(cfg, "synth", n_videos=args.human_videos, video_prefix="video", seed=cfg.synth.seed + 2)
    synthesize(hcfg, human)
    build_manifest(cfg, human / "tracks.jsonl", human / "flow", human / "manifest.jsonl")

    print(fraction_sweep(cfg, machine / "manifest.jsonl", human / "manifest.jsonl", out, args.fractions), end="")


if __name__ == "__main__":
    main()
