import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trajforecast.dataset import (
    DirectoryFlowSource,
    Manifest,
    SplitSpec,
    TooFewVideos,
    UncoveredVideo,
    build_dataset,
    build_samples,
    collate,
    make_folds,
    manifest_text,
    read_manifest,
    select,
    split_videos,
    valid_anchors,
    video_number,
)
from trajforecast.flow import FlowField, PreprocessConfig, flo_path, write_flo
from trajforecast.kinematics import ForecastConfig, Track
from trajforecast.synth import ScenarioSpec, SynthFlowSource, gen_scenario

SMALL = PreprocessConfig(resize_to=12, crop_to=8)


def track_of(length, start=0, vx=2.0, video="v1"):
    return gen_scenario(ScenarioSpec(duration=length, velocity=(vx, 0.0), start_frame=start, video_id=video))


def brute_anchors(start, length, m_v, m_f, n):
    end = start + length - 1
    frames = set(range(start, end + 1))
    out = []
    for t in range(start - 5, end + 5):
        past_ok = all(f in frames for f in range(t - m_v, t + 1))
        # flow at f describes f-1 -> f, so f-1 must be a track frame too
        flow_ok = all(f in frames and f - 1 in frames for f in range(t - m_f + 1, t + 1))
        future_ok = all(f in frames for f in range(t + 1, t + n + 1))
        if past_ok and flow_ok and future_ok:
            out.append(t)
    return out


@settings(max_examples=100)
@given(st.integers(0, 60), st.integers(0, 30), st.integers(1, 12), st.integers(1, 12), st.integers(1, 20))
def test_anchors_match_brute_force(length, start, m_v, m_f, n):
    if length == 0:
        return
    track = Track("0", "v", start, np.tile([0.0, 0.0, 1.0, 1.0], (length, 1)))
    cfg = ForecastConfig(velocity_window=m_v, horizon=n, flow_stack=m_f)
    assert valid_anchors(track, cfg) == brute_anchors(start, length, m_v, m_f, n)


def test_minimum_track_gives_one_sample():
    cfg = ForecastConfig(velocity_window=4, horizon=15, flow_stack=9)
    track, _ = track_of(25)
    spec = ScenarioSpec(duration=25, velocity=(2.0, 0.0), video_id="v1")
    samples = build_samples(track, SynthFlowSource([spec]), cfg, SMALL)
    assert len(samples) == 1 and samples[0].anchor == 9
    assert build_samples(track_of(24)[0], None, cfg) == []


def test_sample_contents():
    cfg = ForecastConfig()
    track, _ = track_of(30, start=100, vx=2.0)
    s = build_samples(track, None, cfg)[0]
    assert s.anchor == 109 and s.flow is None
    assert s.past.shape == (5, 2) and s.truth.shape == (15, 2)
    # exact linear motion: CV is perfect and the correction is zero
    assert np.allclose(s.cv_pred, s.truth) and np.allclose(s.target, 0)
    assert np.allclose(s.truth[0] - s.past[-1], [2.0, 0.0])


def test_stationary_track_targets_zero():
    track = Track("0", "still", 0, np.tile([10.0, 10.0, 40.0, 70.0], (40, 1)))
    samples = build_samples(track, None, ForecastConfig())
    assert len(samples) == 16
    assert all(np.all(s.target == 0) for s in samples)


def test_stride_and_min_history():
    track, _ = track_of(40)
    cfg = ForecastConfig(flow_stack=1)
    assert [s.anchor for s in build_samples(track, None, cfg, stride=5)] == [4, 9, 14, 19, 24]
    assert build_samples(track, None, cfg, min_history=9)[0].anchor == 9


def test_flow_channels_and_range():
    spec = ScenarioSpec(duration=26, velocity=(3.0, 1.0), flow_noise=0.1, video_id="v7")
    track, _ = gen_scenario(spec)
    for m_f, ch in ((9, 18), (5, 10), (1, 2)):
        cfg = ForecastConfig(flow_stack=m_f)
        s = build_samples(track, SynthFlowSource([spec]), cfg, SMALL)[0]
        assert s.flow.shape == (ch, 8, 8) and s.flow.dtype == np.float32
        assert s.flow.min() >= 0 and s.flow.max() <= 1
        # crop sits inside the box so every pixel sees pedestrian motion
        assert abs(s.flow[0].mean() - (3.0 + 50) / 100) < 0.01


def test_random_crop_reproducible():
    spec = ScenarioSpec(duration=30, video_id="v3", flow_noise=0.5)
    track, _ = gen_scenario(spec)
    pre = PreprocessConfig(resize_to=16, crop_to=8, crop_mode="random", seed=2)
    a = build_samples(track, SynthFlowSource([spec]), ForecastConfig(), pre)
    b = build_samples(track, SynthFlowSource([spec]), ForecastConfig(), pre)
    assert [s.crop for s in a] == [s.crop for s in b]
    assert all(np.array_equal(x.flow, y.flow) for x, y in zip(a, b))
    assert len({s.crop for s in a}) > 1


def test_collate_and_subset():
    tracks = [track_of(26, video=f"v{i}")[0] for i in range(3)]
    samples = build_dataset(tracks, None)
    batch = collate(samples)
    assert len(batch) == 6 and batch.flow is None
    assert batch.target.shape == (6, 15, 2)
    sub = batch.subset([0, 2])
    assert len(sub) == 2 and sub.keys == [batch.keys[0], batch.keys[2]]
    with pytest.raises(ValueError):
        collate([])


def numbered_ids():
    return [f"video_{i:04d}" for i in range(1, 347)]


def test_range_split():
    out = split_videos(numbered_ids(), SplitSpec(rule="range"))
    assert len(out["train"]) == 250 and len(out["test"]) == 96
    assert out["train"][-1] == "video_0250" and out["test"][0] == "video_0251"


def test_range_split_uncovered():
    with pytest.raises(UncoveredVideo):
        split_videos(["video_0400"], SplitSpec(rule="range"))
    with pytest.raises(UncoveredVideo):
        video_number("clip")


def test_fraction_split():
    vids = [f"v{i}" for i in range(10)]
    out = split_videos(vids, SplitSpec(rule="fraction", holdout=0.2, seed=1))
    assert len(out["train"]) == 8 and len(out["test"]) == 2
    assert set(out["train"]) | set(out["test"]) == set(vids)
    assert out == split_videos(vids[::-1], SplitSpec(rule="fraction", holdout=0.2, seed=1))


def test_none_split():
    assert split_videos(["b", "a"], SplitSpec()) == {"train": ["a", "b"]}


@settings(max_examples=50)
@given(st.integers(2, 6), st.integers(0, 20), st.integers(0, 1000))
def test_folds_partition_videos(k, extra, seed):
    vids = [f"video_{i}" for i in range(k + extra)]
    folds = make_folds(vids, k, seed)
    assert len(folds) == k
    vals = [v for _, val in folds for v in val]
    assert sorted(vals) == sorted(vids)
    for tr, val in folds:
        assert not set(tr) & set(val)
        assert set(tr) | set(val) == set(vids)
    sizes = [len(val) for _, val in folds]
    assert max(sizes) - min(sizes) <= 1


def test_folds_need_enough_videos():
    with pytest.raises(TooFewVideos):
        make_folds(["a", "b"], 3)


def test_no_video_leaks_across_split():
    tracks = [track_of(30, video=f"video_{i:04d}")[0] for i in range(1, 11)]
    samples = build_dataset(tracks, None)
    parts = split_videos([t.video_id for t in tracks], SplitSpec(rule="fraction", holdout=0.2))
    tr = {s.video_id for s in select(samples, parts["train"])}
    te = {s.video_id for s in select(samples, parts["test"])}
    assert tr and te and not tr & te


def write_synth_flow(root, spec):
    track, _ = gen_scenario(spec)
    src = SynthFlowSource([spec])
    for f in track.frames[1:]:
        write_flo(flo_path(root, spec.video_id, f), src(spec.video_id, f))
    return track, src


def test_manifest_round_trip(tmp_path):
    spec = ScenarioSpec(duration=27, velocity=(2.5, -0.5), flow_noise=0.3, video_id="video_0001")
    track, src = write_synth_flow(tmp_path / "flow", spec)
    cfg = ForecastConfig()
    samples = build_dataset([track], src, cfg, SMALL)
    man = Manifest(cfg, SMALL, "human", None, "flow", samples)
    path = tmp_path / "manifest.jsonl"
    path.write_text(manifest_text(man))
    back = read_manifest(path)
    assert back.forecast == cfg and back.preprocess == SMALL and back.videos == ["video_0001"]
    assert len(back.samples) == 3
    for a, b in zip(samples, back.samples):
        assert a.key == b.key and a.crop == b.crop
        assert np.array_equal(a.flow, b.flow)
        assert np.array_equal(a.target, b.target) and np.array_equal(a.cv_pred, b.cv_pred)
    assert manifest_text(back) == manifest_text(man)


def test_manifest_missing_flow(tmp_path):
    spec = ScenarioSpec(duration=25, video_id="video_0002")
    track, src = write_synth_flow(tmp_path / "flow", spec)
    man = Manifest(ForecastConfig(), SMALL, flow_dir="flow",
                   samples=build_dataset([track], src, ForecastConfig(), SMALL))
    path = tmp_path / "m.jsonl"
    path.write_text(manifest_text(man))
    (tmp_path / "flow" / "video_0002" / "5.flo").unlink()
    with pytest.raises(FileNotFoundError):
        read_manifest(path)
    assert len(read_manifest(path, load_flow=False).samples) == 1


def test_directory_source_matches_render(tmp_path):
    spec = ScenarioSpec(duration=26, video_id="v5", flow_noise=0.2)
    track, src = write_synth_flow(tmp_path, spec)
    disk = DirectoryFlowSource(tmp_path)
    assert disk("v5", 3) == src("v5", 3)
    assert isinstance(disk("v5", 3), FlowField)
