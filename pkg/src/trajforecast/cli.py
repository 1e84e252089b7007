"""Command-line entry point: ``trajforecast <command> [options]``.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 check failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from trajforecast import experiment
from trajforecast.annotate import UnsortedInput
from trajforecast.config import ConfigError, load_config
from trajforecast.dataset import TooFewVideos, UncoveredVideo
from trajforecast.flow import EmptyIntersection, FloFormatError
from trajforecast.gradcheck import grad_check
from trajforecast.model import CheckpointError, ShapeMismatch
from trajforecast.train import EmptyManifest

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_CHECK = 0, 2, 3, 4

GRAD_TOLERANCE = 1e-4

log = logging.getLogger("trajforecast")

# flag -> config key
FLAG_KEYS = {
    "min_score": "tracker.min_score",
    "iou_threshold": "tracker.iou_threshold",
    "max_age": "tracker.max_age",
    "min_height": "filter.min_height",
    "min_length": "filter.min_length",
    "frame_step": "dataset.frame_step",
    "m_flow": "forecast.flow_stack",
    "m_vel": "forecast.velocity_window",
    "horizon": "forecast.horizon",
    "stride": "dataset.stride",
    "fraction": "pretrain.fraction",
    "n_videos": "synth.n_videos",
    "synth_seed": "synth.seed",
    "video_prefix": "synth.video_prefix",
    "epochs": "train.max_epochs",
    "lr": "optim.lr",
}


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI experiment config")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a config key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="trajforecast", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--n-videos", type=int)
    s.add_argument("--synth-seed", type=int)
    s.add_argument("--video-prefix")

    s = sub.add_parser("annotate", parents=[common], help="detections JSONL -> filtered machine tracks")
    s.add_argument("--detections", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--detector")
    s.add_argument("--min-score", type=float)
    s.add_argument("--iou-threshold", type=float)
    s.add_argument("--max-age", type=int)
    s.add_argument("--min-height", type=float)
    s.add_argument("--min-length", type=int)
    s.add_argument("--frame-step", type=int)

    s = sub.add_parser("build", parents=[common], help="tracks + flow -> sample manifest")
    s.add_argument("--tracks", required=True)
    s.add_argument("--flow-dir", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--m-flow", type=int)
    s.add_argument("--m-vel", type=int)
    s.add_argument("--horizon", type=int)
    s.add_argument("--stride", type=int)

    for name, helptext in (("train", "train one model per fold"),
                           ("pretrain", "train on a fraction of a machine-annotated manifest"),
                           ("finetune", "resume from a checkpoint, one model per fold")):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("--manifest", required=True)
        s.add_argument("--out", required=True, help="output directory")
        s.add_argument("--epochs", type=int)
        s.add_argument("--lr", type=float)
        if name == "pretrain":
            s.add_argument("--fraction", type=float)
        if name == "finetune":
            s.add_argument("--checkpoint", required=True)

    s = sub.add_parser("eval", parents=[common], help="CV, CA and model metrics with fold CIs")
    s.add_argument("--manifest", required=True)
    s.add_argument("--checkpoint", action="append", default=[], help="repeat once per fold")
    s.add_argument("--out", required=True, help="output directory")

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    s.add_argument("--seeds", type=int, default=3)
    s.add_argument("--channels", type=int, default=2)
    s.add_argument("--size", type=int, default=8)
    s.add_argument("--epsilon", type=float, default=1e-6)
    return p


def _overrides(args) -> dict[str, str]:
    out = {}
    for flag, key in FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is not None:
            out[key] = str(value)
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set {item!r} must look like section.key=value")
        out[key.strip()] = value.strip()
    return out


def _run(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    cmd = args.command
    log.info("%s: resolved config\n%s", cmd, cfg.to_ini().rstrip())
    if cmd == "gradcheck":
        spec = cfg.net_spec(in_channels=args.channels, input_size=args.size)
        worst = 0.0
        for seed in range(args.seeds):
            err = grad_check(spec, seed=seed, epsilon=args.epsilon)
            print(f"seed {seed}: max relative error {err:.3e}")
            worst = max(worst, err)
        ok = worst < GRAD_TOLERANCE
        print(f"gradcheck {'PASS' if ok else 'FAIL'}: max relative error {worst:.3e} (tolerance {GRAD_TOLERANCE:g})")
        return EXIT_OK if ok else EXIT_CHECK

    out = experiment.output_path(args.out)
    if cmd == "synth":
        info = experiment.synthesize(cfg, out)
        experiment.write_resolved_config(cfg, out)
    elif cmd == "annotate":
        info = experiment.annotate(cfg, args.detections, out, args.detector)
    elif cmd == "build":
        man = experiment.build_manifest(cfg, args.tracks, args.flow_dir, out)
        info = {"samples": len(man.samples), "videos": len(man.videos)}
    elif cmd == "train":
        outs = experiment.train_folds(cfg, args.manifest, out)
        info = {"models": [o.name for o in outs]}
    elif cmd == "pretrain":
        o = experiment.pretrain(cfg, args.manifest, out)
        info = {"model": o.name, "train_videos": len(o.train_videos), "best_epoch": o.result.best_epoch}
    elif cmd == "finetune":
        outs = experiment.finetune(cfg, args.manifest, args.checkpoint, out)
        info = {"models": [o.name for o in outs]}
    elif cmd == "eval":
        report = experiment.evaluate(cfg, args.manifest, args.checkpoint, out)
        info = {m: report.to_dict()["models"][m]["MSE"]["mean"] for m in report.models}
    else:  # pragma: no cover - argparse restricts choices
        raise ConfigError(f"unknown command {cmd}")
    log.info("%s done: %s", cmd, info)
    print(json.dumps({"command": cmd, **info}, sort_keys=True))
    return EXIT_OK


DATA_ERRORS = (OSError, FloFormatError, EmptyIntersection, UnsortedInput, UncoveredVideo, TooFewVideos,
               EmptyManifest, CheckpointError, ShapeMismatch, experiment.CheckpointMismatch,
               json.JSONDecodeError, KeyError)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except DATA_ERRORS as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except ValueError as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
