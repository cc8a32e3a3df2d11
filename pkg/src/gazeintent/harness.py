"""Cross-validation, accuracy-over-time curves, and table rendering."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import baselines, density, neural
from .preprocess import (
    FEATURE_SETS,
    HISTOGRAM_SETS,
    FeatureFile,
    HistogramFeaturizer,
    on_target_points,
)

log = logging.getLogger(__name__)

LENGTH_GRID = (72, 144, 216, 288, 360, 400)

MODELS = ("midas", "gbt", "svm", "logreg", "handedness", "gmm")
REPORT_MODELS = ("midas", "gbt", "svm", "logreg", "handedness")
MODEL_TITLES = {
    "midas": "MIDAS",
    "gbt": "GBT",
    "svm": "SVM",
    "logreg": "Logistic regression",
    "handedness": "Handedness",
    "gmm": "GMM",
}
FEATURE_TITLES = {
    "raw": "raw gaze",
    "raw+target": "raw gaze + target",
    "distance": "gaze-target distances",
    "speed": "gaze speeds",
    "all": "all time series",
    "hist-dist": "histogrammed distances",
    "hist-speed": "histogrammed speeds",
}
# models that read bbox-normalized on-target points need exactly the gaze + target-box set
POINT_MODELS = {"handedness", "gmm"}
POINT_FEATURE_SET = "raw+target"


class InfeasibleCombination(ValueError):
    pass


def check_feasible(model: str, feature_set: str) -> None:
    if model not in MODELS:
        raise ValueError(f"unknown model {model!r}")
    if feature_set not in FEATURE_SETS:
        raise ValueError(f"unknown feature set {feature_set!r}")
    if model == "midas" and feature_set in HISTOGRAM_SETS:
        raise InfeasibleCombination("a sequence model cannot consume histograms")
    if model in POINT_MODELS and feature_set != POINT_FEATURE_SET:
        raise InfeasibleCombination(f"{model} needs gaze and target-box channels ({POINT_FEATURE_SET})")


def is_feasible(model: str, feature_set: str) -> bool:
    try:
        check_feasible(model, feature_set)
    except InfeasibleCombination:
        return False
    return True


# ---------------------------------------------------------------------------
# splits


@dataclass
class SplitPlan:
    scheme: str  # "kfold" or "loso"
    folds: dict[str, int]  # trial_id -> fold
    seed: int
    n_folds: int
    fold_names: list[str] = field(default_factory=list)

    def test_mask(self, trial_ids: Sequence[str], fold: int) -> np.ndarray:
        return np.array([self.folds[t] == fold for t in trial_ids])

    def to_dict(self) -> dict:
        return {
            "scheme": self.scheme,
            "seed": self.seed,
            "n_folds": self.n_folds,
            "fold_names": self.fold_names,
            "folds": self.folds,
        }

    @classmethod
    def from_dict(cls, d) -> "SplitPlan":
        return cls(d["scheme"], {k: int(v) for k, v in d["folds"].items()}, d["seed"], d["n_folds"], d.get("fold_names", []))


def parse_scheme(scheme: str) -> tuple[str, int | None]:
    s = scheme.lower().replace("-", "").replace("_", "")
    if s in ("loso", "leaveonesubjectout"):
        return "loso", None
    if s.startswith("kfold"):
        k = s[5:].strip("()") or "5"
        return "kfold", int(k)
    raise ValueError(f"unknown split scheme {scheme!r}")


def make_split(items, scheme: str = "kfold5", seed: int = 0) -> SplitPlan:
    """Assign every trial to a fold.

    ``items`` is a Dataset, a FeatureFile, or a sequence of (trial_id, subject_id).
    k-fold shuffles uniformly (no stratification) and deals trials round-robin,
    so fold sizes differ by at most one.
    """
    pairs = _id_pairs(items)
    kind, k = parse_scheme(scheme)
    ids = [p[0] for p in pairs]
    if len(set(ids)) != len(ids):
        raise ValueError("trial ids must be unique")
    if kind == "kfold":
        if not 2 <= k <= len(ids):
            raise ValueError(f"k-fold needs 2 <= k <= {len(ids)}")
        order = np.random.default_rng([seed, 101]).permutation(len(ids))
        folds = {ids[j]: pos % k for pos, j in enumerate(order)}
        return SplitPlan("kfold", folds, seed, k, [f"fold{i}" for i in range(k)])
    subjects = sorted({p[1] for p in pairs})
    index = {s: i for i, s in enumerate(subjects)}
    folds = {tid: index[sid] for tid, sid in pairs}
    return SplitPlan("loso", folds, seed, len(subjects), subjects)


def _id_pairs(items) -> list[tuple[str, str]]:
    if hasattr(items, "trials"):
        return [(t.trial_id, t.subject_id) for t in items.trials]
    if hasattr(items, "records"):
        return [(r.trial_id, r.subject_id) for r in items.records]
    return [(str(a), str(b)) for a, b in items]


# ---------------------------------------------------------------------------
# model adapters


def midas_config(n_channels: int, overrides: dict | None = None) -> neural.MidasConfig:
    """Desk-scale defaults: small batches give 30 short epochs enough updates; float32 for speed."""
    base = dict(input_channels=n_channels, hidden_size=32, epochs=30, batch_size=16, lr=2.5e-4, dtype="float32")
    base.update(overrides or {})
    return neural.MidasConfig(**base)


class Adapter:
    """Uniform fit/predict over the records of a feature file."""

    def __init__(self, model: str, feature_set: str, seed, options: dict | None = None):
        self.model = model
        self.feature_set = feature_set
        self.seed = seed
        self.options = dict(options or {})
        self.fitted = None
        self.featurizer = None

    # features -----------------------------------------------------------
    def _vectors(self, records, length=None, fit=False):
        series = [r.series for r in records]
        if self.feature_set in HISTOGRAM_SETS:
            if length is not None:
                series = [s.truncate(length) for s in series]
            if fit:
                channel = series[0].channels[0]
                self.featurizer = HistogramFeaturizer(channel, frame_size=self.options.get("frame_size"))
                self.featurizer.fit(series)
            return self.featurizer.transform(series)
        return baselines.flatten_series(series, length)

    def _points(self, records, length=None):
        out = []
        for r in records:
            s = r.series if length is None else r.series.truncate(length)
            out.append(on_target_points(s))
        return out

    # fit / predict ----------------------------------------------------------
    def fit(self, records, length=None):
        y = np.array([r.label for r in records])
        m = self.model
        if m == "midas":
            cfg = midas_config(len(records[0].series.channels), self.options.get("midas"))
            self.fitted, self.train_log = neural.train(cfg, [r.series for r in records], y, seed=self.seed)
        elif m in ("gbt", "svm", "logreg"):
            X = self._vectors(records, length, fit=True)
            opts = self.options.get(m, {})
            cls = {"gbt": baselines.GradientBoostedTrees, "svm": baselines.LinearSVM, "logreg": baselines.LogisticRegression}[m]
            self.fitted = cls(**opts).fit(X, y)
        elif m == "handedness":
            u = [baselines.mean_u(p) for p in self._points(records, length)]
            self.fitted = baselines.HandednessClassifier().fit(u, y)
        elif m == "gmm":
            opts = {"seed": int(np.atleast_1d(self.seed)[0]), **self.options.get("gmm", {})}
            self.fitted = density.GmmClassifier(**opts).fit(self._points(records, length), y)
        return self

    def predict(self, records, length=None) -> np.ndarray:
        m = self.model
        if m == "midas":
            batch = neural.make_batch(self.fitted, [r.series for r in records])
            if length is not None:
                batch = batch.truncate(length)
            return neural.predict(self.fitted, batch)
        if m in ("gbt", "svm", "logreg"):
            return self.fitted.predict(self._vectors(records, length))
        if m == "handedness":
            return self.fitted.predict([baselines.mean_u(p) for p in self._points(records, length)])
        return self.fitted.predict(self._points(records, length))


# ---------------------------------------------------------------------------
# cross-validation


@dataclass
class CvEntry:
    model: str
    feature_set: str
    scheme: str
    fold_accuracies: list[float]
    skipped_folds: list[int] = field(default_factory=list)
    curve: list[tuple[int, float, float]] = field(default_factory=list)  # (length, mean, std)
    fold_curves: list[list[float]] = field(default_factory=list)
    seed: int = 0

    @property
    def mean(self) -> float:
        return float(np.mean(self.fold_accuracies)) if self.fold_accuracies else float("nan")

    @property
    def std(self) -> float:
        # population std across folds
        return float(np.std(self.fold_accuracies)) if self.fold_accuracies else float("nan")

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "feature_set": self.feature_set,
            "scheme": self.scheme,
            "seed": self.seed,
            "fold_accuracies": self.fold_accuracies,
            "skipped_folds": self.skipped_folds,
            "mean": self.mean,
            "std": self.std,
            "curve": [list(c) for c in self.curve],
            "fold_curves": self.fold_curves,
        }

    @classmethod
    def from_dict(cls, d) -> "CvEntry":
        return cls(
            d["model"],
            d["feature_set"],
            d["scheme"],
            list(d["fold_accuracies"]),
            list(d.get("skipped_folds", [])),
            [tuple(c) for c in d.get("curve", [])],
            d.get("fold_curves", []),
            d.get("seed", 0),
        )


def run_cv(
    features: FeatureFile,
    model: str,
    split: SplitPlan,
    seed: int = 0,
    options: dict | None = None,
    lengths: Sequence[int] | None = None,
    on_fold: Callable | None = None,
) -> CvEntry:
    """Fit on all folds but one, score the held-out fold, for every fold.

    With ``lengths`` the held-out accuracy is also measured on sequences
    truncated to each length: the sequence model is trained once per fold
    (truncation-augmented), classical models are refit for every length.
    """
    check_feasible(model, features.feature_set)
    options = dict(options or {})
    options.setdefault("frame_size", tuple(features.frame_size))
    records = features.records
    ids = [r.trial_id for r in records]
    labels = np.array([r.label for r in records])
    entry = CvEntry(model, features.feature_set, split.scheme, [], seed=seed)
    for fold in range(split.n_folds):
        test = split.test_mask(ids, fold)
        train_idx, test_idx = np.flatnonzero(~test), np.flatnonzero(test)
        if len(np.unique(labels[train_idx])) < 2 or len(test_idx) == 0:
            log.warning("fold %d skipped: single-class training data or empty test fold", fold)
            entry.skipped_folds.append(fold)
            continue
        tr = [records[i] for i in train_idx]
        te = [records[i] for i in test_idx]
        y_te = labels[test_idx]
        adapter = Adapter(model, features.feature_set, [seed, fold], options).fit(tr)
        acc = float(np.mean(adapter.predict(te) == y_te))
        entry.fold_accuracies.append(acc)
        if lengths:
            row = []
            for L in lengths:
                if model == "midas":
                    row.append(float(np.mean(adapter.predict(te, length=L) == y_te)))
                else:
                    refit = Adapter(model, features.feature_set, [seed, fold, L], options).fit(tr, length=L)
                    row.append(float(np.mean(refit.predict(te, length=L) == y_te)))
            entry.fold_curves.append(row)
        if on_fold is not None:
            on_fold(fold, adapter, acc)
    if lengths and entry.fold_curves:
        fc = np.array(entry.fold_curves)
        entry.curve = [(int(L), float(fc[:, j].mean()), float(fc[:, j].std())) for j, L in enumerate(lengths)]
    return entry


def accuracy_over_time(features: FeatureFile, model: str, split: SplitPlan, lengths=LENGTH_GRID, seed=0, options=None):
    """(length, mean accuracy) pairs over the CV folds."""
    entry = run_cv(features, model, split, seed, options, lengths)
    return [(L, m) for L, m, _ in entry.curve]


# ---------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    entries: list[CvEntry] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def get(self, model: str, feature_set: str) -> CvEntry | None:
        for e in self.entries:
            if e.model == model and e.feature_set == feature_set:
                return e
        return None

    def to_dict(self) -> dict:
        return {"kind": "eval_report", "metadata": self.metadata, "entries": [e.to_dict() for e in self.entries]}

    @classmethod
    def from_dict(cls, d) -> "EvalReport":
        return cls([CvEntry.from_dict(e) for e in d.get("entries", [])], d.get("metadata", {}))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"


def near_chance(mean: float, std: float) -> bool:
    return abs(mean - 0.5) <= 2 * std


def _cell(model, feature_set, report: EvalReport, fmt: str) -> str:
    if not is_feasible(model, feature_set):
        return "N/A"
    e = report.get(model, feature_set)
    if e is None or not e.fold_accuracies:
        return ""
    flag = "*" if near_chance(e.mean, e.std) else ""
    if fmt == "csv":
        return f"{e.mean!r} ± {e.std!r}{flag}"
    return f"{100 * e.mean:.1f} ± {100 * e.std:.1f}{flag}"


def render_report(report: EvalReport, fmt: str = "csv") -> str:
    """Rows are feature sets, columns the report models.  A trailing ``*``
    marks accuracies within two standard deviations of chance."""
    if fmt not in ("csv", "md"):
        raise ValueError("format must be csv or md")
    header = ["features"] + [MODEL_TITLES[m] for m in REPORT_MODELS]
    present = {e.feature_set for e in report.entries}
    rows = []
    for fs in FEATURE_SETS:
        if fs in present:
            rows.append([FEATURE_TITLES[fs]] + [_cell(m, fs, report, fmt) for m in REPORT_MODELS])
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
        return buf.getvalue()
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    lines += ["| " + " | ".join(r) + " |" for r in rows]
    return "\n".join(lines) + "\n"


def parse_report_csv(text: str) -> dict[tuple[str, str], tuple[float, float, bool] | str]:
    """Inverse of the CSV rendering: {(model, feature_set): (mean, std, near_chance) or "N/A"}."""
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        return {}
    title_to_model = {v: k for k, v in MODEL_TITLES.items()}
    title_to_fs = {v: k for k, v in FEATURE_TITLES.items()}
    models = [title_to_model[h] for h in rows[0][1:]]
    out = {}
    for row in rows[1:]:
        fs = title_to_fs[row[0]]
        for m, cell in zip(models, row[1:]):
            if cell == "N/A":
                out[(m, fs)] = "N/A"
            elif cell:
                flag = cell.endswith("*")
                mean, std = cell.rstrip("*").split(" ± ")
                out[(m, fs)] = (float(mean), float(std), flag)
    return out


def curve_csv(entry: CvEntry, sample_rate: float = 120.0) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["length", "seconds", "accuracy", "std"])
    for L, m, s in entry.curve:
        w.writerow([L, f"{L / sample_rate:.4f}", repr(m), repr(s)])
    return buf.getvalue()


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]
