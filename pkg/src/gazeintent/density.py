"""Per-intent Gaussian mixtures over bbox-normalized on-target gaze points."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dataio import INSPECTION, MANIPULATION

REG = 1e-6
LOG_2PI = np.log(2 * np.pi)


class InsufficientData(ValueError):
    pass


class CollapsedComponent(RuntimeError):
    pass


class NoEvidence(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class GmmModel:
    weights: np.ndarray  # k
    means: np.ndarray  # k x 2
    covariances: np.ndarray  # k x 2 x 2
    log_likelihood: float = float("nan")  # total over the fitting points
    history: tuple[float, ...] = field(default=(), repr=False)

    @property
    def k(self) -> int:
        return len(self.weights)

    @property
    def n_params(self) -> int:
        k = self.k
        return (k - 1) + 2 * k + 3 * k

    def component_log_pdf(self, points: np.ndarray) -> np.ndarray:
        """N x k matrix of log(w_j N(x | mu_j, S_j))."""
        return _component_log_pdf(np.asarray(points, float), self.weights, self.means, self.covariances)

    def log_pdf(self, points) -> np.ndarray:
        return _logsumexp(self.component_log_pdf(points), axis=1)

    def score(self, points) -> float:
        return float(self.log_pdf(points).sum())

    def sample(self, n: int, rng) -> np.ndarray:
        comp = rng.choice(self.k, size=n, p=self.weights)
        out = np.empty((n, 2))
        for j in range(self.k):
            sel = comp == j
            out[sel] = rng.multivariate_normal(self.means[j], self.covariances[j], size=int(sel.sum()))
        return out

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covariances": self.covariances.tolist(),
            "log_likelihood": self.log_likelihood,
        }

    @classmethod
    def from_dict(cls, d) -> "GmmModel":
        return cls(
            np.asarray(d["weights"], float),
            np.asarray(d["means"], float).reshape(-1, 2),
            np.asarray(d["covariances"], float).reshape(-1, 2, 2),
            float(d.get("log_likelihood", float("nan"))),
        )


def _logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return np.squeeze(m, axis) + np.log(np.sum(np.exp(a - m), axis=axis))


def _component_log_pdf(x, weights, means, covs) -> np.ndarray:
    # closed-form 2x2 inverse and determinant
    a, b, d = covs[:, 0, 0], covs[:, 0, 1], covs[:, 1, 1]
    det = a * d - b * b
    dx = x[:, None, 0] - means[None, :, 0]
    dy = x[:, None, 1] - means[None, :, 1]
    maha = (d * dx * dx - 2 * b * dx * dy + a * dy * dy) / det
    with np.errstate(divide="ignore"):
        logw = np.log(weights)
    return logw - LOG_2PI - 0.5 * np.log(det) - 0.5 * maha


def _kmeanspp(x: np.ndarray, k: int, rng) -> np.ndarray:
    centres = [x[rng.integers(len(x))]]
    d2 = np.sum((x - centres[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        idx = rng.choice(len(x), p=d2 / total) if total > 0 else rng.integers(len(x))
        centres.append(x[idx])
        d2 = np.minimum(d2, np.sum((x - x[idx]) ** 2, axis=1))
    return np.array(centres)


def _m_step(x, resp, reg):
    nk = resp.sum(axis=0)
    weights = nk / len(x)
    means = (resp.T @ x) / nk[:, None]
    dx = x[:, None, 0] - means[None, :, 0]
    dy = x[:, None, 1] - means[None, :, 1]
    sxx = (resp * dx * dx).sum(0) / nk
    sxy = (resp * dx * dy).sum(0) / nk
    syy = (resp * dy * dy).sum(0) / nk
    covs = np.stack([np.stack([sxx, sxy], -1), np.stack([sxy, syy], -1)], 1)
    return weights, means, floor_eigenvalues(covs, reg)


def floor_eigenvalues(covs: np.ndarray, reg: float = REG) -> np.ndarray:
    """Raise covariance eigenvalues below ``reg`` to ``reg``.

    This is the constrained maximizer of the Gaussian likelihood over
    covariances with eigenvalues >= reg, so EM over that fixed set keeps its
    monotone likelihood; a constant diagonal load would not.
    """
    covs = np.array(covs, dtype=float)
    lam, vec = np.linalg.eigh(covs)
    low = lam[:, 0] < reg
    if np.any(low):
        lam = np.maximum(lam[low], reg)
        covs[low] = np.einsum("kij,kj,klj->kil", vec[low], lam, vec[low])
    return covs


def em_fit(points, k: int, seed=0, max_iter: int = 200, tol: float = 1e-6, reg: float = REG) -> GmmModel:
    """EM for a full-covariance mixture with k-means++ seeding.

    Stops when the total log-likelihood improves by less than ``tol``.  A
    component whose weight drops below 1e-8 is reseeded once at a random point.
    """
    x = np.asarray(points, dtype=float)
    if x.ndim != 2 or x.shape[1] != 2:
        raise ValueError("points must be N x 2")
    if len(x) < k or k < 1:
        raise InsufficientData(f"need at least k={k} points, got {len(x)}")
    if not np.all(np.isfinite(x)):
        raise ValueError("points must be finite")
    rng = np.random.default_rng(seed)
    n = len(x)
    # initial hard assignment to nearest seeded centre, then one M-step
    centres = _kmeanspp(x, k, rng)
    near = np.argmin(((x[:, None, :] - centres[None]) ** 2).sum(-1), axis=1)
    resp = np.zeros((n, k))
    resp[np.arange(n), near] = 1.0
    resp += 1e-10
    resp /= resp.sum(axis=1, keepdims=True)
    weights, means, covs = _m_step(x, resp, reg)

    history: list[float] = []
    reseeded = False
    for _ in range(max_iter):
        comp = _component_log_pdf(x, weights, means, covs)
        ll_point = _logsumexp(comp, axis=1)
        ll = float(ll_point.sum())
        if history and ll - history[-1] < tol:
            history.append(ll)
            break
        history.append(ll)
        resp = np.exp(comp - ll_point[:, None])
        weights, means, covs = _m_step(x, resp, reg)
        dead = weights < 1e-8
        if np.any(dead):
            if reseeded:
                raise CollapsedComponent("mixture component collapsed twice")
            reseeded = True
            for j in np.flatnonzero(dead):
                means[j] = x[rng.integers(n)]
                covs[j] = floor_eigenvalues(np.cov(x.T, bias=True)[None], reg)[0]
                weights[j] = 1.0 / k
            weights /= weights.sum()
            history = []  # likelihood restarts after a reseed
    final = float(_logsumexp(_component_log_pdf(x, weights, means, covs), axis=1).sum())
    return GmmModel(weights, means, covs, final, tuple(history))


def bic(model: GmmModel, points) -> float:
    x = np.asarray(points, float)
    return model.n_params * np.log(len(x)) - 2.0 * model.score(x)


def select_k(points, k_range: Sequence[int] = range(1, 9), seeds_per_k: int = 5, seed=0):
    """Best-of-seeds fit for each k; returns (k*, model) minimizing BIC, ties to smaller k."""
    x = np.asarray(points, float)
    best_k, best_model, best_bic = None, None, np.inf
    for k in k_range:
        if k > len(x):
            continue
        fits = []
        for s in range(seeds_per_k):
            try:
                fits.append(em_fit(x, k, seed=[*np.atleast_1d(seed).tolist(), k, s]))
            except CollapsedComponent:
                continue
        if not fits:
            continue
        model = max(fits, key=lambda m: m.log_likelihood)
        score = bic(model, x)
        if score < best_bic:  # strict: equal BIC keeps the smaller k
            best_k, best_model, best_bic = k, model, score
    if best_model is None:
        raise InsufficientData("no candidate k could be fitted")
    return best_k, best_model


def gmm_classify(points, model_inspection: GmmModel, model_manipulation: GmmModel) -> str:
    """Higher total log-likelihood wins; an exact tie goes to inspection."""
    x = np.asarray(points, float).reshape(-1, 2)
    if len(x) == 0:
        raise NoEvidence("no on-target points")
    li = model_inspection.score(x)
    lm = model_manipulation.score(x)
    return MANIPULATION if lm > li else INSPECTION


@dataclass
class GmmClassifier:
    """Pair of per-intent mixtures fitted on pooled on-target points."""

    k_range: Sequence[int] = range(1, 9)
    seeds_per_k: int = 5
    max_points: int | None = 5000  # subsample per class to bound fit time
    seed: int = 0
    models: dict = field(default_factory=dict)
    no_evidence: int = 0

    def fit(self, point_sets: Sequence[np.ndarray], labels: Sequence[int]) -> "GmmClassifier":
        rng = np.random.default_rng([self.seed, 7])
        labels = np.asarray(labels)
        for intent, lab in ((INSPECTION, 0), (MANIPULATION, 1)):
            pts = [p for p, y in zip(point_sets, labels) if y == lab and len(p)]
            if not pts:
                raise InsufficientData(f"no on-target points for {intent}")
            x = np.concatenate(pts)
            if self.max_points and len(x) > self.max_points:
                x = x[np.sort(rng.choice(len(x), self.max_points, replace=False))]
            _, self.models[intent] = select_k(x, self.k_range, self.seeds_per_k, seed=[self.seed, lab])
        return self

    def predict(self, point_sets: Sequence[np.ndarray]) -> np.ndarray:
        out = np.zeros(len(point_sets), dtype=int)
        self.no_evidence = 0
        for i, p in enumerate(point_sets):
            try:
                out[i] = int(gmm_classify(p, self.models[INSPECTION], self.models[MANIPULATION]) == MANIPULATION)
            except NoEvidence:
                self.no_evidence += 1  # defaults to inspection
        return out

    def to_json(self) -> str:
        payload = {"kind": "gmm_pair", **{k: m.to_dict() for k, m in self.models.items()}}
        return json.dumps(payload, sort_keys=True, default=lambda v: float(v))

    @classmethod
    def from_json(cls, text: str) -> "GmmClassifier":
        d = json.loads(text)
        clf = cls()
        clf.models = {k: GmmModel.from_dict(d[k]) for k in (INSPECTION, MANIPULATION)}
        return clf
