"""Acceptance criteria, one check per criterion at its stated tolerance and budget.

Under pytest each criterion is one test and a PASS/FAIL line per criterion
is printed in the session summary. Run directly for the same lines on
stdout::

    python3 tests/test_acceptance.py
"""

from __future__ import annotations

import json
import math
import sys
import tempfile
import time
from functools import lru_cache
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from conftest import ACCEPTANCE_LINES, DESK_INI  # noqa: E402
from trajforecast import cli  # noqa: E402
from trajforecast.annotate import FilterConfig, TrackerConfig, filter_tracks, track_stream  # noqa: E402
from trajforecast.config import ExperimentConfig, replace_section  # noqa: E402
from trajforecast.dataset import (  # noqa: E402
    Manifest, SplitSpec, build_dataset, build_samples, collate, make_folds, select, split_videos,
)
from trajforecast.experiment import evaluate  # noqa: E402
from trajforecast.flow import FlowField, PreprocessConfig, flo_read, flo_write, normalize  # noqa: E402
from trajforecast.gradcheck import grad_check  # noqa: E402
from trajforecast.kinematics import ForecastConfig, ca_forecast, recover_locations, residual_target  # noqa: E402
from trajforecast.metrics import aggregate_folds, de_at, de_curve, format_ci, mse_metric  # noqa: E402
from trajforecast.model import (  # noqa: E402
    NetSpec, checkpoint_bytes, init_params, params_from_bytes, predict_locations,
)
from trajforecast.synth import (  # noqa: E402
    ScenarioSpec, SynthFlowSource, corrupt_detections, desk_suite, gen_scenario, merge_streams,
)
from trajforecast.train import AdamConfig, TrainConfig, train  # noqa: E402

CRITERIA: dict[int, tuple[str, float, object]] = {}
_ELAPSED: dict[int, float] = {}


def criterion(number: int, title: str, budget: float):
    def register(fn):
        CRITERIA[number] = (title, budget, fn)
        return fn
    return register


def run_criterion(number: int, workdir: Path) -> tuple[bool, str]:
    title, budget, fn = CRITERIA[number]
    start = time.perf_counter()
    try:
        detail = fn(workdir)
        ok = True
    except AssertionError as exc:
        detail, ok = f"{exc}", False
    elapsed = time.perf_counter() - start
    _ELAPSED[number] = elapsed
    if ok and elapsed >= budget:
        ok, detail = False, f"{detail}; over budget"
    line = f"{'PASS' if ok else 'FAIL'} {number:>2} {title} ({elapsed:.1f} s / {budget:g} s): {detail}"
    ACCEPTANCE_LINES.append(line)
    return ok, line


# shared desk-scale suite for learning efficacy and the input ablation

PRE32 = PreprocessConfig(resize_to=32, crop_to=32)
FAST = AdamConfig(lr=1e-2, lr_reduced=1e-3, weight_decay=0.0)
FIT = TrainConfig(batch_size=32, max_epochs=40, patience=4)


@lru_cache(maxsize=None)
def learning_suite():
    specs = desk_suite(100, kinds=("start_walk", "stop"), seed=0, flow_stack=9, flow_noise=0.25)
    tracks = [gen_scenario(s)[0] for s in specs]
    parts = split_videos([s.video_id for s in specs], SplitSpec(rule="fraction", holdout=0.2, seed=0))
    return specs, tracks, parts


@lru_cache(maxsize=None)
def suite_samples(m_f: int):
    specs, tracks, _ = learning_suite()
    # a common minimum history keeps the anchors identical across m_f
    return build_dataset(tracks, SynthFlowSource(specs), ForecastConfig(flow_stack=m_f), PRE32, min_history=9)


def held_out_mse(m_f: int, folds: int) -> tuple[list[float], float, int]:
    _, _, parts = learning_suite()
    samples = suite_samples(m_f)
    test = collate(select(samples, parts["test"]))
    spec = NetSpec(in_channels=2 * m_f, input_size=32, horizon=15)
    if folds >= 2:
        pairs = make_folds(parts["train"], folds, 0)
    else:
        inner = split_videos(parts["train"], SplitSpec(rule="fraction", holdout=0.2, holdout_name="val"))
        pairs = [(inner["train"], inner["val"])]
    scores = []
    for tr, va in pairs:
        result = train(collate(select(samples, tr)), spec, FAST, FIT, val=collate(select(samples, va)))
        scores.append(mse_metric(predict_locations(result.params, test.flow, test.cv_pred), test.truth))
    return scores, mse_metric(test.cv_pred, test.truth), len(samples)


# criteria

@criterion(1, "analytic baseline exactness", 5)
def baseline_exactness(_):
    rng = np.random.default_rng(1)
    cfg = ForecastConfig()
    worst_cv, worst_ca, min_cv_ca = 0.0, 0.0, math.inf
    for i in range(50):
        vel = tuple(rng.uniform(-5, 5, 2))
        cv_spec = ScenarioSpec(duration=40, velocity=vel, video_id=f"cv{i}")
        s = collate(build_samples(gen_scenario(cv_spec)[0], None, cfg))
        worst_cv = max(worst_cv, max(de_curve(s.cv_pred, s.truth)))

        acc = tuple(rng.uniform(0.05, 0.3, 2) * rng.choice([-1, 1], 2))
        ca_spec = ScenarioSpec(kind="constant_acceleration", duration=40, velocity=vel, accel=acc,
                               video_id=f"ca{i}")
        s = collate(build_samples(gen_scenario(ca_spec)[0], None, cfg))
        ca = np.stack([ca_forecast(p, cfg.horizon, cfg.velocity_window) for p in s.past])
        worst_ca = max(worst_ca, max(de_curve(ca, s.truth)))
        min_cv_ca = min(min_cv_ca, de_at(s.cv_pred, s.truth, 15))
    assert worst_cv <= 1e-9, f"CV DE on constant velocity {worst_cv:.3g}"
    assert worst_ca <= 1e-6, f"CA DE on constant acceleration {worst_ca:.3g}"
    assert min_cv_ca > 0, "CV DE@15 on constant acceleration is zero"
    return f"max CV DE {worst_cv:.2g}, max CA DE {worst_ca:.2g}, min CV DE@15 under accel {min_cv_ca:.3g}"


@criterion(2, "residual round trip", 1)
def residual_round_trip(_):
    rng = np.random.default_rng(2)
    truth = rng.uniform(-2000, 2000, (1000, 15, 2))
    cv = truth + rng.normal(0, 100, truth.shape)
    back = np.stack([recover_locations(c, residual_target(t, c)) for t, c in zip(truth, cv)])
    err = float(np.abs(back - truth).max())
    assert err <= 1e-9, f"max error {err:.3g} px"
    return f"1000 pairs, max error {err:.2g} px"


@criterion(3, "zero-correction identity", 10)
def zero_correction_identity(_):
    pre = PreprocessConfig(resize_to=24, crop_to=16)
    kinds = ("constant_velocity", "constant_acceleration", "start_walk", "stop", "ego_turn")
    worst = 0.0
    for seed, m_f in ((0, 9), (1, 5), (2, 1)):
        specs = desk_suite(10, kinds=kinds, seed=seed, flow_stack=m_f, flow_noise=1.0)
        specs = [s if s.kind != "ego_turn" else ScenarioSpec(**{**s.__dict__, "ego_rate": 0.3}) for s in specs]
        fc = ForecastConfig(flow_stack=m_f)
        samples = build_dataset([gen_scenario(s)[0] for s in specs], SynthFlowSource(specs), fc, pre)
        cfg = replace_section(ExperimentConfig(forecast=fc, preprocess=pre), "split", rule="none")
        man = Manifest(fc, pre, samples=samples)
        models = [init_params(cfg.net_spec(), seed=s) for s in range(2)]
        report = evaluate(cfg, None, models, man=man)
        for metric in report.metric_names():
            cv = report.values[("CV", metric)]
            model = report.values[("model", metric)]
            worst = max(worst, max(abs(a - b) for a, b in zip(cv, model)))
    assert worst <= 1e-9, f"max |model - CV| {worst:.3g}"
    return f"3 manifests x 2 untrained models, max |model - CV| over MSE and DE@t = {worst:.2g}"


@criterion(4, "gradient correctness", 30)
def gradient_correctness(_):
    spec = NetSpec(in_channels=2, input_size=8, conv=((4, 3, 2), (4, 3, 1)), horizon=3, precision=64)
    errors = [grad_check(spec, seed) for seed in range(5)]
    assert max(errors) < 1e-4, f"max relative error {max(errors):.3g}"
    return f"5 seeds, max relative error {max(errors):.2g}"


@criterion(5, "learning efficacy", 300)
def learning_efficacy(_):
    scores, cv, n = held_out_mse(9, folds=1)
    assert n >= 200, f"only {n} samples"
    ratio = scores[0] / cv
    assert ratio <= 0.7, f"model MSE {scores[0]:.2f} vs CV {cv:.2f} (ratio {ratio:.3f})"
    return f"{n} samples, held-out MSE model {scores[0]:.2f} vs CV {cv:.2f} (ratio {ratio:.3f} <= 0.7)"


@criterion(6, "flow-stack ablation direction", 600)
def ablation_direction(_):
    five, _, _ = held_out_mse(5, folds=3)
    one, cv, _ = held_out_mse(1, folds=3)
    m5, h5 = aggregate_folds(five)
    m1, h1 = aggregate_folds(one)
    assert m5 <= m1 + h1, f"m_f=5 {format_ci(m5, h5, 2)} vs m_f=1 {format_ci(m1, h1, 2)}"
    return f"held-out MSE m_f=5 {format_ci(m5, h5, 2)} vs m_f=1 {format_ci(m1, h1, 2)} (CV {cv:.2f})"


def _multi_pedestrian_streams(n_videos=8):
    # pedestrians in separate lanes, entering and leaving at different frames
    truth, streams = [], []
    for v in range(n_videos):
        for lane in range(3):
            spec = ScenarioSpec(duration=30 + 5 * lane, box=(20.0 + 40 * lane, 10.0 + 75 * lane,
                                50.0 + 40 * lane, 70.0 + 75 * lane),
                                velocity=(2.0 + lane, 0.2 * (lane - 1)), video_id=f"video_{v:04d}",
                                track_id=str(lane), start_frame=3 * lane + v)
            track, _ = gen_scenario(spec)
            truth.append(track)
            streams.append(corrupt_detections(track, seed=v))
    return truth, merge_streams(*streams)


def _run_chain(work: Path, config: Path) -> list[int]:
    steps = [
        ["synth", "--out", work / "machine", "--n-videos", "40", "--video-prefix", "machine", "--synth-seed", "1"],
        ["annotate", "--detections", work / "machine" / "detections.jsonl",
         "--out", work / "machine" / "machine_tracks.jsonl", "--detector", "synthetic"],
        ["build", "--tracks", work / "machine" / "machine_tracks.jsonl", "--flow-dir", work / "machine" / "flow",
         "--out", work / "machine" / "manifest.jsonl"],
        ["synth", "--out", work / "human", "--n-videos", "30", "--video-prefix", "video", "--synth-seed", "2"],
        ["build", "--tracks", work / "human" / "tracks.jsonl", "--flow-dir", work / "human" / "flow",
         "--out", work / "human" / "manifest.jsonl"],
        ["pretrain", "--manifest", work / "machine" / "manifest.jsonl", "--out", work / "pre", "--fraction", "0.5"],
        ["finetune", "--manifest", work / "human" / "manifest.jsonl", "--checkpoint", work / "pre" / "pretrain.ckpt",
         "--out", work / "ft", "--set", "finetune.lr=0.003"],
    ]
    codes = []
    for step in steps:
        codes.append(cli.main([step[0], "--config", str(config)] + [str(a) for a in step[1:]]))
        if codes[-1] != 0:
            break
    return codes


@criterion(7, "machine-annotation pipeline", 300)
def machine_annotation(work):
    truth, dets = _multi_pedestrian_streams()
    recovered = track_stream(dets, TrackerConfig(), "synthetic")
    matched = 0
    for t in truth:
        hits = [m for m in recovered if m.video_id == t.video_id and m.start_frame == t.start_frame
                and len(m) == len(t) and np.allclose(m.boxes, t.boxes)]
        matched += len(hits) == 1
    assert len(recovered) == len(truth), f"{len(recovered)} tracks for {len(truth)} pedestrians"
    assert matched == len(truth), f"identities recovered {matched}/{len(truth)}"

    rng = np.random.default_rng(7)
    noisy = []
    for i in range(60):
        h = float(rng.uniform(40, 70))
        spec = ScenarioSpec(duration=int(rng.integers(10, 45)), box=(50.0, 40.0, 75.0, 40.0 + h),
                            velocity=(float(rng.uniform(-3, 3)), 0.0), video_id=f"noisy_{i:03d}")
        noisy.append(corrupt_detections(gen_scenario(spec)[0], drop_rate=0.05, jitter=1.0, seed=i))
    raw = track_stream(merge_streams(*noisy))
    kept = filter_tracks(raw, FilterConfig())
    violations = sum(1 for t in kept if len(t) < 25 or t.heights.min() < 50)
    assert violations == 0, f"{violations} filtered tracks violate the thresholds"
    assert 0 < len(kept) < len(raw), f"filter kept {len(kept)} of {len(raw)}"

    config = work / "desk.ini"
    config.write_text(DESK_INI)
    codes = _run_chain(work, config)
    assert codes == [0] * 7, f"command exit codes {codes}"
    phases = []
    for sub in ("pre", "ft"):
        for run in json.loads((work / sub / "summary.json").read_text())["runs"]:
            start, best = run["initial_train_loss"], run["best_train_loss"]
            assert best < start, f"{run['name']} loss {start:.3f} -> {best:.3f}"
            phases.append(f"{run['name']} {start:.1f}->{best:.1f}")
    return (f"identities {matched}/{len(truth)}, {len(kept)}/{len(raw)} tracks kept with 0 violations, "
            f"chain ok: {', '.join(phases)}")


@criterion(8, "metric oracles", 1)
def metric_oracles(_):
    truth = np.zeros((4, 15, 2))
    pred = truth + [3.0, 4.0]
    assert mse_metric(pred, truth) == 25.0
    assert de_at(pred, truth, 15) == 5.0
    mean, hw = aggregate_folds([1, 2, 3, 4, 5])
    # t(0.975, 4) = 2.7764451051977987
    hand = 2.7764451051977987 * math.sqrt(2.5) / math.sqrt(5)
    assert mean == 3.0 and abs(hw - hand) < 1e-6, f"half-width {hw} vs {hand}"
    text = format_ci(mean, hw)
    assert text == "3.0 ± 2.0", text
    return f"MSE 25, DE 5.0, CI half-width {hw:.6f}, rendered {text!r}"


@criterion(9, "format fidelity", 10)
def format_fidelity(_):
    rng = np.random.default_rng(9)
    for _ in range(1000):
        h, w = rng.integers(1, 24, 2)
        data = rng.normal(0, 30, (h, w, 2)).astype(np.float32)
        back = flo_read(flo_write(FlowField(data)))
        assert back.data.tobytes() == data.tobytes(), "flo round trip changed bytes"
    ends = normalize(FlowField(np.array([[[-50.0, 0.0], [50.0, 0.0]]]))).data
    assert ends[0, 0, 0] == 0.0 and ends[0, 0, 1] == 0.5 and ends[0, 1, 0] == 1.0
    x = rng.uniform(0, 1, (4, 18, 16, 16))
    for precision in (32, 64):
        spec = NetSpec(input_size=16, precision=precision)
        params = init_params(spec, seed=precision, head_scale=1.0)
        cv = rng.normal(size=(4, 15, 2))
        back = params_from_bytes(checkpoint_bytes(params))
        a, b = predict_locations(params, x, cv), predict_locations(back, x, cv)
        assert a.tobytes() == b.tobytes(), f"{precision}-bit checkpoint changed predictions"
    return "1000 .flo fields bit-exact, normalize endpoints exact, 32/64-bit checkpoints bitwise"


def _end_to_end(work: Path, config: Path) -> list[int]:
    steps = [
        ["synth", "--out", work / "syn", "--n-videos", "20"],
        ["annotate", "--detections", work / "syn" / "detections.jsonl", "--out", work / "tracks.jsonl"],
        ["build", "--tracks", work / "tracks.jsonl", "--flow-dir", work / "syn" / "flow",
         "--out", work / "manifest.jsonl"],
        ["train", "--manifest", work / "manifest.jsonl", "--out", work / "models", "--epochs", "5"],
        ["eval", "--manifest", work / "manifest.jsonl", "--checkpoint", work / "models" / "fold0.ckpt",
         "--checkpoint", work / "models" / "fold1.ckpt", "--out", work / "eval"],
    ]
    return [cli.main([s[0], "--config", str(config)] + [str(a) for a in s[1:]]) for s in steps]


@criterion(10, "end-to-end determinism", 600)
def determinism(work):
    config = work / "desk.ini"
    config.write_text(DESK_INI)
    codes = [_end_to_end(work / name, config) for name in ("run_a", "run_b")]
    assert codes == [[0] * 5] * 2, f"exit codes {codes}"
    names = ["eval/report.csv", "eval/report.json", "models/fold0.ckpt", "models/fold1.ckpt", "manifest.jsonl"]
    for name in names:
        a = (work / "run_a" / name).read_bytes()
        b = (work / "run_b" / name).read_bytes()
        assert a == b, f"{name} differs between runs"
    total = sum(_ELAPSED.values())
    assert total < 600, f"acceptance runtime {total:.0f} s"
    return f"2 runs, {len(names)} artifacts byte-identical; acceptance runtime so far {total:.0f} s"


@pytest.mark.parametrize("number", sorted(CRITERIA), ids=lambda n: CRITERIA[n][0].replace(" ", "_"))
def test_acceptance(number, tmp_path):
    ok, line = run_criterion(number, tmp_path)
    print(line)
    assert ok, line


if __name__ == "__main__":
    failed = 0
    for number in sorted(CRITERIA):
        with tempfile.TemporaryDirectory() as tmp:
            ok, line = run_criterion(number, Path(tmp))
        print(line, flush=True)
        failed += not ok
    sys.exit(1 if failed else 0)
