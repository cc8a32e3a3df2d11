from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from types import SimpleNamespace

from gazeintent.dataio import GazeTrace, Track, quantize
from gazeintent.preprocess import (
    CHANNELS,
    FEATURE_SETS,
    EmptyWindow,
    FeatureSeries,
    HistogramFeaturizer,
    build_features,
    crop_trial,
    distance_series,
    histogram,
    interpolate_track,
    load_features,
    normalize_to_bbox,
    on_target_points,
    save_features,
    speed_series,
    trial_features,
)

from conftest import make_trial

CLOCK = quantize(np.arange(400) / 120.0)  # the gaze clock as stored in a trial


def track_at(samples, boxes, clock=CLOCK):
    return Track("cup", clock[np.asarray(samples)], np.asarray(boxes, float))


# --- interpolation ---------------------------------------------------------


def test_short_gap_is_filled_linearly():
    tr = track_at([0, 4], [[100, 0, 120, 20], [108, 0, 128, 20]])
    bbox, ok = interpolate_track(tr, CLOCK[:5])
    assert ok.all()
    # stored clock times carry 9 significant digits, so the weights are only nearly quarters
    np.testing.assert_allclose(bbox[:, 0], [100, 102, 104, 106, 108], rtol=0, atol=1e-6)
    w = (CLOCK[:5] - CLOCK[0]) / (CLOCK[4] - CLOCK[0])
    np.testing.assert_allclose(bbox[:, 0], 100 + 8 * w, rtol=0, atol=1e-12)


@pytest.mark.parametrize("between, filled", [(99, True), (100, False), (150, False)])
def test_gap_rule_is_strict(between, filled):
    tr = track_at([0, between + 1], [[0, 0, 10, 10], [10, 0, 20, 10]])
    _, ok = interpolate_track(tr, CLOCK[: between + 2])
    assert ok[0] and ok[-1]
    assert ok[1:-1].all() == filled
    assert ok[1:-1].any() == filled


def test_leading_and_trailing_samples_stay_masked():
    tr = track_at([10, 20], [[0, 0, 10, 10], [0, 0, 10, 10]])
    bbox, ok = interpolate_track(tr, CLOCK[:30])
    assert not ok[:10].any() and not ok[21:].any() and ok[10:21].all()
    assert np.all(bbox[~ok] == 0.0)


def test_empty_track_is_fully_masked():
    bbox, ok = interpolate_track(Track("cup", np.zeros(0), np.zeros((0, 4))), CLOCK[:50])
    assert not ok.any() and np.all(bbox == 0.0)


@settings(max_examples=100, deadline=None)
@given(
    st.lists(st.floats(0.0, 0.8), min_size=2, max_size=25, unique=True),
    st.lists(st.floats(-50.0, 50.0), min_size=8, max_size=8),
)
def test_interpolation_is_exact_on_linear_tracks(times, coef):
    # corners are linear in time, detections off the gaze grid; a bare
    # namespace skips the storage quantization of Track
    det_t = np.sort(np.asarray(times))
    a, b = np.asarray(coef[:4]) + np.array([0, 0, 100, 100]), np.asarray(coef[4:])
    tr = SimpleNamespace(t=det_t, bbox=a + det_t[:, None] * b)
    bbox, ok = interpolate_track(tr, CLOCK, max_gap=10**6)
    inside = (CLOCK >= det_t[0]) & (CLOCK <= det_t[-1])
    assert np.array_equal(ok, inside)
    expect = a + CLOCK[ok, None] * b
    assert np.max(np.abs(bbox[ok] - expect), initial=0.0) < 1e-12


# --- cropping --------------------------------------------------------------


def test_long_trial_crops_without_padding():
    fs = trial_features(make_trial(n=120 + 520))
    assert len(fs) == 400 and fs.mask.all()


def test_short_trial_is_padded_with_masked_zeros():
    fs = trial_features(make_trial(n=120 + 350))
    assert len(fs) == 400
    assert fs.mask[:350].all() and not fs.mask[350:].any()
    assert np.all(fs.values[350:] == 0.0)


def test_window_starts_at_first_sample_after_instruction_end():
    tr = make_trial(instruction_end_t=1.004)
    win = crop_trial(tr)
    first = np.searchsorted(tr.gaze.t, 1.004)
    assert win.gaze.t[0] == tr.gaze.t[first] and tr.gaze.t[first - 1] < 1.004


def test_crop_is_idempotent(small_dataset):
    for tr in small_dataset.trials:
        once = crop_trial(tr)
        assert crop_trial(once) == once


def test_no_post_instruction_samples_raises():
    with pytest.raises(EmptyWindow):
        crop_trial(make_trial(n=100, instruction_end_t=0.9))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_features_ignore_content_before_instruction_end(seed):
    rng = np.random.default_rng(seed)
    tr = make_trial(n=600, instruction_end_t=1.5)
    g = tr.gaze
    pre = g.t < tr.instruction_end_t
    x, y, valid = g.x.copy(), g.y.copy(), g.valid.copy()
    x[pre] = rng.uniform(0, 1280, pre.sum())
    y[pre] = rng.uniform(0, 960, pre.sum())
    valid[pre] = rng.random(pre.sum()) < 0.5
    x[~valid] = y[~valid] = 0.0
    tt = tr.target_track
    boxes = tt.bbox.copy()
    early = tt.t < tr.instruction_end_t
    boxes[early] += rng.uniform(-50, 50, size=(early.sum(), 4)) * [1, 1, 0, 0]
    other = replace(tr, gaze=GazeTrace(g.t, x, y, valid), tracks={"cup": Track("cup", tt.t, boxes)})
    assert trial_features(other) == trial_features(tr)


def test_masked_fraction_matches_invalid_inputs():
    rng = np.random.default_rng(4)
    valid = rng.random(600) > 0.1
    tr = make_trial(n=600, valid=valid)
    fs = trial_features(tr)
    window = valid[120:520]
    assert np.mean(~fs.channel_mask("gaze_x")) == np.mean(~window)
    pairs = window[:-1] & window[1:]
    assert np.array_equal(fs.channel_mask("speed")[:-1], pairs) and not fs.channel_mask("speed")[-1]


# --- channels --------------------------------------------------------------


def test_speed_of_a_step_is_exact():
    speed, ok = speed_series(np.array([[0.0, 0.0], [3.0, 4.0]]), np.array([True, True]), 120.0)
    assert speed[0] == 600.0 and ok[0]
    assert speed[1] == 0.0 and not ok[1]


def test_speed_of_constant_gaze_is_zero_and_invalid_pairs_masked():
    xy = np.full((6, 2), 7.0)
    valid = np.array([1, 1, 0, 1, 1, 1], bool)
    speed, ok = speed_series(xy, valid)
    assert np.all(speed == 0.0)
    assert ok.tolist() == [True, False, False, True, True, False]


def test_distance_examples():
    xy = np.array([[15.0, 25.0], [0.0, 0.0], [0.0, 0.0]])
    bbox = np.array([[10.0, 20.0, 20.0, 30.0], [20.0, 30.0, 40.0, 50.0], [20.0, 30.0, 40.0, 50.0]])
    d, ok = distance_series(xy, [True] * 3, bbox, [True, True, False])
    assert d.tolist() == [0.0, 50.0, 0.0] and ok.tolist() == [True, True, False]


def test_normalize_to_bbox_examples():
    assert normalize_to_bbox((15.0, 25.0), (10, 20, 20, 30)) == (0.5, 0.5, True)
    assert normalize_to_bbox((10.0, 20.0), (10, 20, 20, 30)) == (0.0, 0.0, True)
    u, _, on = normalize_to_bbox((5.0, 25.0), (10, 20, 20, 30))
    assert u < 0 and not on
    with pytest.raises(ValueError):
        normalize_to_bbox((0, 0), (10, 20, 10, 30))


def test_feature_series_zeroes_masked_entries():
    fs = FeatureSeries(("a",), np.ones((4, 1)), np.array([1, 0, 1, 0], bool))
    assert fs.values[:, 0].tolist() == [1.0, 0.0, 1.0, 0.0]


def test_on_target_points_are_inside_unit_square(small_dataset):
    pts = np.concatenate([on_target_points(trial_features(t)) for t in small_dataset.trials])
    assert len(pts) > 0 and np.all((pts >= 0) & (pts <= 1))


# --- histograms ------------------------------------------------------------


def test_histogram_of_midpoint_fills_one_bin():
    h = histogram(np.full(50, 5.0), range=(0.0, 10.0))
    assert h.counts.max() == 1.0 and np.count_nonzero(h.counts) == 1


def test_empty_histogram_is_flagged():
    h = histogram(np.ones(10), np.zeros(10, bool))
    assert h.flag == "EmptyHistogram" and np.all(h.counts == 0.0) and len(h.counts) == 32


def test_uniform_grid_is_near_uniform():
    # oracle: numpy's own binning on the same edges
    grid = np.linspace(0.0, 7.0, 1001)
    h = histogram(grid, range=(0.0, 7.0))
    ref, _ = np.histogram(grid, bins=32, range=(0.0, 7.0))
    np.testing.assert_allclose(h.counts, ref / ref.sum(), atol=1e-12)
    assert np.max(np.abs(h.counts - 1 / 32)) < 2 / 32


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=200), st.integers(1, 64))
def test_histogram_sums_to_one_and_clips(values, bins):
    h = histogram(np.array(values), bins=bins, range=(-10.0, 10.0))
    assert abs(h.counts.sum() - 1.0) < 1e-9
    v = np.array(values)
    assert h.counts[0] >= np.mean(v < -10.0) - 1e-12
    assert h.counts[-1] >= np.mean(v >= 10.0) - 1e-12


def test_histogram_featurizer_freezes_ranges():
    fs = [FeatureSeries(("speed",), np.arange(100.0)[:, None] * k, np.ones(100, bool)) for k in (1, 2)]
    hf = HistogramFeaturizer("speed").fit(fs)
    assert hf.range == (0.0, float(np.percentile(np.r_[np.arange(100.0), 2 * np.arange(100.0)], 99.5)))
    X = hf.transform(fs + [FeatureSeries(("speed",), np.full((10, 1), 1e6), np.ones(10, bool))])
    assert X.shape == (3, 32) and X[2, -1] == 1.0
    dist = HistogramFeaturizer("distance", frame_size=(1280, 960)).fit([])
    assert dist.range == (0.0, 1600.0)


# --- feature files ---------------------------------------------------------


@pytest.mark.parametrize("feature_set", sorted(FEATURE_SETS))
def test_feature_file_round_trip(small_dataset, tmp_path, feature_set):
    ff = build_features(small_dataset, feature_set)
    assert ff.records[0].series.channels == tuple(FEATURE_SETS[feature_set])
    p = tmp_path / "f.jsonl"
    save_features(ff, p)
    back = load_features(p)
    assert back.feature_set == feature_set
    assert [r.series for r in back.records] == [r.series for r in ff.records]
    assert [(r.trial_id, r.subject_id, r.label) for r in back.records] == [
        (r.trial_id, r.subject_id, r.label) for r in ff.records
    ]
    q = tmp_path / "g.jsonl"
    save_features(back, q)
    assert p.read_bytes() == q.read_bytes()


def test_all_channels_present_in_full_set():
    assert set(FEATURE_SETS["all"]) <= set(CHANNELS)


def test_unknown_feature_set_is_rejected(small_dataset):
    with pytest.raises(ValueError):
        build_features(small_dataset, "pupil")
