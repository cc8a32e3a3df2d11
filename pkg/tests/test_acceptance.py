"""End-to-end acceptance checks, one test per criterion.

Each test records a one-line verdict that the terminal summary prints at the
end of the run (see conftest.py).  The heavy fixtures (default dataset,
5-fold and leave-one-subject-out network runs) are shared across tests, so a
full run takes on the order of an hour on one core.
"""
import time
from types import SimpleNamespace

import numpy as np
import pytest
from scipy import stats

from conftest import make_trial, record_verdict
from gazeintent import harness, neural
from gazeintent.cli import main
from gazeintent.dataio import quantize
from gazeintent.density import em_fit, select_k
from gazeintent.preprocess import build_features, crop_trial, interpolate_track, speed_series
from gazeintent.synthgen import GeneratorConfig, generate_dataset


def verdict(criterion: str, ok: bool, detail: str) -> None:
    record_verdict(f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}")


# --- 1: gradients -------------------------------------------------------------


def test_c1_gradient_check():
    t0 = time.perf_counter()
    model = neural.MidasModel.init(neural.MidasConfig(input_channels=2, hidden_size=4), seed=0)
    rng = np.random.default_rng(0)
    X = rng.normal(size=(10, 3, 2))
    M = np.ones((10, 3), bool)
    M[6:, 2] = False
    err = neural.grad_check(model, neural.Batch(X, M, np.array([0, 1, 0])), eps=1e-5)
    elapsed = time.perf_counter() - t0
    ok = err < 1e-4 and elapsed < 30
    verdict("1", ok, f"max relative error {err:.2e}, {elapsed:.1f} s")
    assert err < 1e-4
    assert elapsed < 30


# --- 2: EM and BIC ------------------------------------------------------------


def three_clusters(rng, n=600):
    centres = np.array([[0.2, 0.2], [0.8, 0.25], [0.5, 0.8]])
    return np.vstack([rng.normal(c, 0.04, size=(n // 3, 2)) for c in centres])


def test_c2_em_monotone_and_bic_selection():
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        k = int(rng.integers(1, 6))
        n = int(rng.integers(20, 400))
        x = rng.normal(size=(n, 2)) * rng.uniform(0.02, 2.0, size=2) + rng.integers(0, 3, size=(n, 1))
        m = em_fit(x, k, seed=seed)
        worst = min(worst, float(np.min(np.diff(m.history), initial=0.0)))
    hits = sum(select_k(three_clusters(np.random.default_rng(100 + s)), seed=s)[0] == 3 for s in range(20))
    elapsed = time.perf_counter() - t0
    ok = worst >= -1e-9 and hits >= 19 and elapsed < 60
    verdict("2", ok, f"largest per-iteration drop {max(-worst, 0.0):.1e}, k=3 chosen {hits}/20, {elapsed:.1f} s")
    assert worst >= -1e-9
    assert hits >= 19
    assert elapsed < 60


# --- 3: preprocessing ---------------------------------------------------------


def test_c3_preprocessing_exactness(small_dataset):
    clock = quantize(np.arange(400) / 120.0)
    # piecewise-linear corners with breakpoints at the detections
    det_t = np.array([0.013, 0.41, 0.77, 1.52, 2.9])
    corners = np.array([[10, 20, 60, 90], [35, 18, 95, 80], [30, 40, 70, 100], [100, 40, 160, 110], [90, 70, 150, 130]], float)
    bbox, ok = interpolate_track(SimpleNamespace(t=det_t, bbox=corners), clock, max_gap=10**6)
    ref = np.column_stack([np.interp(clock[ok], det_t, corners[:, j]) for j in range(4)])
    interp_err = float(np.max(np.abs(bbox[ok] - ref)))

    gap_track = SimpleNamespace(t=clock[[0, 101]], bbox=np.array([[0, 0, 10, 10], [10, 0, 20, 10]], float))
    _, gap_ok = interpolate_track(gap_track, clock[:102])
    gap_masked = not gap_ok[1:101].any()

    idempotent = all(crop_trial(crop_trial(t)) == crop_trial(t) for t in small_dataset.trials)
    idempotent &= crop_trial(crop_trial(make_trial())) == crop_trial(make_trial())

    speed, _ = speed_series(np.array([[0.0, 0.0], [3.0, 4.0]]), np.array([True, True]), 120.0)
    ok_all = interp_err < 1e-12 and gap_masked and idempotent and speed[0] == 600.0
    verdict("3", ok_all, f"interpolation error {interp_err:.1e}, 100-gap masked {gap_masked}, idempotent {idempotent}, step speed {float(speed[0])!r}")
    assert interp_err < 1e-12
    assert gap_masked
    assert idempotent
    assert speed[0] == 600.0


# --- 4: generator calibration -------------------------------------------------


def measured_peak_speeds(trial, path) -> list[float]:
    """Peak sample-to-sample speed over each task-phase saccade with fully valid samples."""
    g = trial.gaze
    xy = np.column_stack([g.x, g.y])
    peaks = []
    for t0, t1, _, _ in path.saccades:
        i0 = max(int(np.searchsorted(g.t, t0)) - 1, 0)
        i1 = min(int(np.searchsorted(g.t, t1)) + 1, len(g.t))
        if i1 - i0 < 2 or not g.valid[i0:i1].all():
            continue
        peaks.append(float(np.max(np.hypot(*np.diff(xy[i0:i1], axis=0).T)) * 120.0))
    return peaks


def within_bbox_points(trial):
    from gazeintent.preprocess import on_target_points, trial_features

    return on_target_points(trial_features(trial))


def test_c4_generator_calibration():
    t0 = time.perf_counter()
    cfg = GeneratorConfig(n_subjects=8, trials_per_subject=250, rng_seed=1)
    ds, paths = generate_dataset(cfg, with_scanpaths=True)
    assert len(ds) == 2000
    mean_x = {0: [], 1: []}
    peaks = []
    points = {0: [], 1: []}
    for trial, path in zip(ds.trials, paths):
        g = trial.gaze
        mean_x[trial.label].append(g.x[g.valid].mean())
        peaks += measured_peak_speeds(trial, path)
        pts = within_bbox_points(trial)
        if len(pts):
            points[trial.label].append(pts)
    offset = float(np.mean(mean_x[1]) - np.mean(mean_x[0]))

    peaks = np.array(peaks)
    shape, _, scale = stats.gamma.fit(peaks, floc=0.0)
    ks_speed = float(stats.kstest(peaks, "gamma", args=(shape, 0.0, scale)).statistic)

    # five samples from each trial's on-target set, equal count per class
    rng = np.random.default_rng(0)
    pooled = {
        label: np.concatenate([p[rng.integers(len(p), size=5)] for p in per_trial])
        for label, per_trial in points.items()
    }
    n_parity = min(5000, *(len(v) for v in pooled.values()))
    sample = {label: v[rng.choice(len(v), n_parity, replace=False)] for label, v in pooled.items()}
    p_u = float(stats.ks_2samp(sample[0][:, 0], sample[1][:, 0]).pvalue)
    p_v = float(stats.ks_2samp(sample[0][:, 1], sample[1][:, 1]).pvalue)
    elapsed = time.perf_counter() - t0

    ok = 85 <= offset <= 115 and ks_speed < 0.05 and min(p_u, p_v) > 0.01 and elapsed < 120
    verdict(
        "4",
        ok,
        f"x offset {offset:.1f} px, speed KS {ks_speed:.3f} ({len(peaks)} saccades), "
        f"bbox parity p(u)={p_u:.3f} p(v)={p_v:.3f} (n={n_parity}), {elapsed:.0f} s",
    )
    assert 85 <= offset <= 115
    assert ks_speed < 0.05
    assert p_u > 0.01 and p_v > 0.01
    assert elapsed < 120


# --- 5-7: model comparison on the default synthetic set -----------------------


@pytest.fixture(scope="module")
def default_features():
    ds = generate_dataset(GeneratorConfig())
    return {fs: build_features(ds, fs) for fs in ("raw", "raw+target")}


@pytest.fixture(scope="module")
def kfold_results(default_features):
    t0 = time.perf_counter()
    raw, target = default_features["raw"], default_features["raw+target"]
    split = harness.make_split(raw, "kfold5", seed=0)
    out = {
        "midas": harness.run_cv(raw, "midas", split, seed=0, lengths=harness.LENGTH_GRID),
        "gbt": harness.run_cv(raw, "gbt", split, seed=0),
        "logreg": harness.run_cv(raw, "logreg", split, seed=0),
        "handedness": harness.run_cv(target, "handedness", split, seed=0),
        "gmm": harness.run_cv(target, "gmm", split, seed=0),
    }
    out["elapsed"] = time.perf_counter() - t0
    return out


def test_c5_table_ordering(kfold_results):
    r = kfold_results
    midas, gbt, logreg = r["midas"], r["gbt"], r["logreg"]
    checks = {
        "MIDAS >= 0.85": midas.mean >= 0.85,
        "MIDAS >= GBT + 3": midas.mean >= gbt.mean + 0.03,
        "handedness <= 0.60": r["handedness"].mean <= 0.60,
        "GMM <= 0.60": r["gmm"].mean <= 0.60,
        "logreg near chance": harness.near_chance(logreg.mean, logreg.std),
        "runtime < 30 min": r["elapsed"] < 1800,
    }
    detail = ", ".join(
        f"{name} {r[name].mean:.3f}±{r[name].std:.3f}" for name in ("midas", "gbt", "logreg", "handedness", "gmm")
    )
    failed = [k for k, v in checks.items() if not v]
    verdict("5", not failed, f"{detail}, {r['elapsed'] / 60:.1f} min" + (f"; failed: {failed}" if failed else ""))
    assert not failed, failed


def test_c6_accuracy_grows_with_length(kfold_results):
    curve = kfold_results["midas"].curve
    acc = np.array([m for _, m, _ in curve])
    gain = acc[-1] - acc[0]
    worst_dip = float(np.max(np.maximum.accumulate(acc) - acc))
    ok = gain >= 0.10 and worst_dip <= 0.02
    points = " ".join(f"{L}:{m:.3f}" for L, m, _ in curve)
    verdict("6", ok, f"{points}; gain {100 * gain:.1f} pts, largest dip {100 * worst_dip:.1f} pts")
    assert gain >= 0.10
    assert worst_dip <= 0.02


def test_c7_loso_matches_kfold(default_features, kfold_results):
    raw = default_features["raw"]
    loso = harness.run_cv(raw, "midas", harness.make_split(raw, "loso"), seed=0)
    kfold = kfold_results["midas"]
    gap = abs(loso.mean - kfold.mean)
    ok = gap <= 0.05
    verdict("7", ok, f"LOSO {loso.mean:.3f}±{loso.std:.3f} vs 5-fold {kfold.mean:.3f}, gap {100 * gap:.1f} pts")
    assert gap <= 0.05


# --- 8: determinism -----------------------------------------------------------


def run_pipeline(root, config_path):
    root.mkdir()
    steps = [
        ["gen", "--config", str(config_path), "--seed", "11", "--out", str(root / "ds.jsonl")],
        ["prep", "--in", str(root / "ds.jsonl"), "--features", "raw", "--out", str(root / "raw.jsonl")],
        ["train", "--model", "midas", "--features", str(root / "raw.jsonl"), "--cv", "kfold2", "--seed", "11",
         "--epochs", "2", "--hidden", "8", "--out", str(root / "midas")],
        ["train", "--model", "gbt", "--features", str(root / "raw.jsonl"), "--cv", "kfold2", "--seed", "11",
         "--out", str(root / "gbt")],
        ["eval", "--run", str(root / "midas"), "--features", str(root / "raw.jsonl"), "--curve",
         "--out", str(root / "curve.csv")],
        ["report", str(root / "midas" / "results.json"), str(root / "gbt" / "results.json"),
         "--out", str(root / "table.csv")],
    ]
    for argv in steps:
        assert main(argv) == 0, argv


def test_c8_pipeline_is_byte_identical(tmp_path):
    import json

    cfg = tmp_path / "gen.json"
    cfg.write_text(json.dumps(GeneratorConfig(n_subjects=2, trials_per_subject=16).to_dict()))
    run_pipeline(tmp_path / "a", cfg)
    run_pipeline(tmp_path / "b", cfg)
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    differing = [str(f) for f in files if (tmp_path / "a" / f).read_bytes() != (tmp_path / "b" / f).read_bytes()]
    kinds = {"dataset": "ds.jsonl", "features": "raw.jsonl", "checkpoint": "midas/fold0.ckpt.json.bin", "report": "table.csv"}
    present = all((tmp_path / "a" / v).exists() for v in kinds.values())
    ok = present and not differing
    verdict("8", ok, f"{len(files)} files compared, differing: {differing or 'none'}")
    assert present
    assert not differing
