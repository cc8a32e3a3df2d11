"""Non-sequential classifiers over fixed-size vectors, plus the handedness threshold rule."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

N_THRESHOLDS = 101


class FitError(ValueError):
    pass


def _check_xy(X, y):
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=int)
    if X.ndim != 2 or len(X) != len(y):
        raise FitError("X must be N x D with one label per row")
    if X.shape[1] == 0:
        raise FitError("feature dimension is zero")
    return X, y


def flatten_series(series_list, length: int | None = None) -> np.ndarray:
    """Row-per-trial vectors: the masked window flattened time-major (masked entries are zero)."""
    rows = []
    for fs in series_list:
        v = fs.values if length is None else fs.values[:length]
        rows.append(v.ravel())
    return np.array(rows)


# ---------------------------------------------------------------------------
# handedness


@dataclass
class HandednessClassifier:
    """mean u > theta -> manipulation."""

    theta: float = 0.5
    train_accuracy: float = float("nan")
    thresholds_evaluated: int = 0

    def fit(self, mean_u, labels) -> "HandednessClassifier":
        u = np.asarray(mean_u, float)
        y = np.asarray(labels, int)
        if not (np.any(y == 0) and np.any(y == 1)):
            raise FitError("handedness fit needs both classes")
        thetas = np.round(np.arange(N_THRESHOLDS) * 0.01, 2)
        acc = np.array([np.mean((u > th).astype(int) == y) for th in thetas])
        best = int(np.argmax(acc))  # first maximum: ties go to the smaller theta
        self.theta = float(thetas[best])
        self.train_accuracy = float(acc[best])
        self.thresholds_evaluated = len(thetas)
        return self

    def predict(self, mean_u) -> np.ndarray:
        return (np.asarray(mean_u, float) > self.theta).astype(int)

    def to_dict(self) -> dict:
        return {"kind": "handedness", "theta": self.theta}


def handedness_fit(mean_u, labels) -> float:
    return HandednessClassifier().fit(mean_u, labels).theta


def mean_u(points: np.ndarray) -> float:
    """Mean bbox-normalized horizontal position of on-target points; NaN if none."""
    return float(np.mean(points[:, 0])) if len(points) else float("nan")


# ---------------------------------------------------------------------------
# linear models


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def logreg_loss_grad(w: np.ndarray, b: float, X: np.ndarray, y: np.ndarray, l2: float):
    """Mean log loss + (l2/2)|w|^2 and its gradient."""
    z = X @ w + b
    # log(1 + e^z) - y z, computed stably
    loss = np.mean(np.logaddexp(0.0, z) - y * z) + 0.5 * l2 * w @ w
    r = (_sigmoid(z) - y) / len(y)
    return loss, X.T @ r + l2 * w, r.sum()


@dataclass
class LogisticRegression:
    l2: float = 1e-4
    epochs: int = 200
    lr: float = 0.1
    w: np.ndarray | None = None
    b: float = 0.0
    losses: list = field(default_factory=list, repr=False)

    def fit(self, X, y) -> "LogisticRegression":
        X, y = _check_xy(X, y)
        self.w = np.zeros(X.shape[1])
        self.b = 0.0
        self.losses = []
        for _ in range(self.epochs):
            loss, gw, gb = logreg_loss_grad(self.w, self.b, X, y, self.l2)
            self.losses.append(float(loss))
            self.w = self.w - self.lr * gw
            self.b = self.b - self.lr * gb
        return self

    def decision_function(self, X) -> np.ndarray:
        return np.asarray(X, float) @ self.w + self.b

    def predict(self, X) -> np.ndarray:
        return (self.decision_function(X) > 0).astype(int)

    def to_dict(self) -> dict:
        return {"kind": "logreg", "l2": self.l2, "w": self.w.tolist(), "b": self.b}


def logreg_fit(X, y, l2=1e-4, epochs=200, lr=0.1) -> LogisticRegression:
    return LogisticRegression(l2, epochs, lr).fit(X, y)


@dataclass
class LinearSVM:
    """Primal soft-margin SVM: minimize 0.5|w|^2 + C * mean hinge, by subgradient descent."""

    C: float = 1.0
    epochs: int = 500
    lr: float = 0.01
    w: np.ndarray | None = None
    b: float = 0.0

    def objective(self, X, y) -> float:
        s = 2 * np.asarray(y) - 1
        hinge = np.maximum(0.0, 1 - s * (X @ self.w + self.b))
        return 0.5 * self.w @ self.w + self.C * hinge.mean()

    def fit(self, X, y) -> "LinearSVM":
        X, y = _check_xy(X, y)
        s = 2 * y - 1
        n, d = X.shape
        self.w = np.zeros(d)
        self.b = 0.0
        best = (np.inf, self.w, self.b)
        for ep in range(1, self.epochs + 1):
            margin = s * (X @ self.w + self.b)
            active = margin < 1
            gw = self.w - self.C * (s[active, None] * X[active]).sum(0) / n
            gb = -self.C * s[active].sum() / n
            step = self.lr / np.sqrt(ep)
            self.w = self.w - step * gw
            self.b = self.b - step * gb
            obj = self.objective(X, y)
            if obj < best[0]:
                best = (obj, self.w.copy(), self.b)
        # subgradient steps are not monotone; keep the best iterate
        _, self.w, self.b = best
        # the bias is unregularized and its steps scale with C, so finish with its exact optimum
        self.b = _best_bias(X @ self.w, s, self.b)
        return self

    def decision_function(self, X) -> np.ndarray:
        return np.asarray(X, float) @ self.w + self.b

    def predict(self, X) -> np.ndarray:
        return (self.decision_function(X) > 0).astype(int)

    def to_dict(self) -> dict:
        return {"kind": "svm", "C": self.C, "w": self.w.tolist(), "b": self.b}


def _best_bias(f: np.ndarray, s: np.ndarray, b0: float) -> float:
    """argmin_b mean hinge(s * (f + b)); the minimum sits at a breakpoint b = s_i - f_i."""
    cand = np.r_[s - f, b0]
    loss = np.maximum(0.0, 1.0 - s[None, :] * (f[None, :] + cand[:, None])).mean(1)
    # ties keep the subgradient solution, then the smallest |b|
    best = np.flatnonzero(loss <= loss.min() + 1e-12)
    if loss[-1] <= loss.min() + 1e-12:
        return float(b0)
    return float(cand[best[np.argmin(np.abs(cand[best]))]])


def svm_fit(X, y, C=1.0, epochs=500, lr=0.01) -> LinearSVM:
    return LinearSVM(C, epochs, lr).fit(X, y)


# ---------------------------------------------------------------------------
# gradient-boosted trees


@dataclass
class Tree:
    """Array-encoded regression tree; leaves have feature == -1."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def predict(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.int64)
        while True:
            f = self.feature[node]
            internal = f >= 0
            if not np.any(internal):
                return self.value[node]
            idx = np.flatnonzero(internal)
            go_left = X[idx, f[idx]] <= self.threshold[node[idx]]
            node[idx] = np.where(go_left, self.left[node[idx]], self.right[node[idx]])

    @property
    def depth(self) -> int:
        def walk(i):
            return 0 if self.feature[i] < 0 else 1 + max(walk(self.left[i]), walk(self.right[i]))

        return walk(0)

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("feature", "threshold", "left", "right", "value")}

    @classmethod
    def from_dict(cls, d) -> "Tree":
        return cls(
            np.asarray(d["feature"], np.int64),
            np.asarray(d["threshold"], float),
            np.asarray(d["left"], np.int64),
            np.asarray(d["right"], np.int64),
            np.asarray(d["value"], float),
        )


def _bin_edges(X: np.ndarray, max_bins: int) -> list[np.ndarray]:
    """Candidate thresholds per feature: midpoints between distinct quantile values."""
    edges = []
    qs = np.linspace(0, 1, max_bins + 1)[1:-1]
    for j in range(X.shape[1]):
        col = X[:, j]
        u = np.unique(col)
        if len(u) <= max_bins:
            cand = (u[:-1] + u[1:]) / 2
        else:
            cand = np.unique(np.quantile(col, qs))
        edges.append(cand)
    return edges


class _TreeBuilder:
    """Newton-step regression trees on binned features."""

    def __init__(self, X: np.ndarray, max_bins: int, l2: float, min_leaf: int):
        self.edges = _bin_edges(X, max_bins)
        self.nb = max(len(e) for e in self.edges) + 1
        # bin index b means edges[b-1] < x <= edges[b]
        self.B = np.column_stack([np.searchsorted(e, X[:, j], side="left") for j, e in enumerate(self.edges)]).astype(
            np.int64
        )
        self.l2 = l2
        self.min_leaf = min_leaf
        d = X.shape[1]
        self.offsets = (np.arange(d) * self.nb)[None, :]

    def _hist(self, rows, g, h):
        d = self.B.shape[1]
        flat = (self.B[rows] + self.offsets).ravel()
        G = np.bincount(flat, weights=np.repeat(g[rows], d), minlength=d * self.nb).reshape(d, self.nb)
        H = np.bincount(flat, weights=np.repeat(h[rows], d), minlength=d * self.nb).reshape(d, self.nb)
        C = np.bincount(flat, minlength=d * self.nb).reshape(d, self.nb)
        return G, H, C

    def build(self, g: np.ndarray, h: np.ndarray, max_depth: int) -> Tree:
        feature, threshold, left, right, value = [], [], [], [], []

        def new_node():
            for lst, v in ((feature, -1), (threshold, 0.0), (left, -1), (right, -1), (value, 0.0)):
                lst.append(v)
            return len(feature) - 1

        def grow(node, rows, depth):
            G, H = g[rows].sum(), h[rows].sum()
            value[node] = -G / (H + self.l2)
            if depth >= max_depth or len(rows) < 2 * self.min_leaf:
                return
            Gh, Hh, Ch = self._hist(rows, g, h)
            GL, HL, CL = np.cumsum(Gh, 1)[:, :-1], np.cumsum(Hh, 1)[:, :-1], np.cumsum(Ch, 1)[:, :-1]
            GR, HR, CR = G - GL, H - HL, len(rows) - CL
            parent = G * G / (H + self.l2)
            gain = GL**2 / (HL + self.l2) + GR**2 / (HR + self.l2) - parent
            ok = (CL >= self.min_leaf) & (CR >= self.min_leaf)
            for j, e in enumerate(self.edges):
                ok[j, len(e):] = False
            gain = np.where(ok, gain, -np.inf)
            j, b = np.unravel_index(np.argmax(gain), gain.shape)
            # zero-gain splits are allowed so interactions like XOR can be found at depth 2
            if not np.isfinite(gain[j, b]) or gain[j, b] < -1e-9 * (1.0 + abs(parent)):
                return
            feature[node] = int(j)
            threshold[node] = float(self.edges[j][b])
            go_left = self.B[rows, j] <= b
            lnode, rnode = new_node(), new_node()
            left[node], right[node] = lnode, rnode
            grow(lnode, rows[go_left], depth + 1)
            grow(rnode, rows[~go_left], depth + 1)

        root = new_node()
        grow(root, np.arange(len(g)), 0)
        return Tree(
            np.array(feature, np.int64),
            np.array(threshold, float),
            np.array(left, np.int64),
            np.array(right, np.int64),
            np.array(value, float),
        )


@dataclass
class GradientBoostedTrees:
    """Boosting on logistic loss; each tree takes one Newton step on the current log-odds."""

    n_trees: int = 200
    max_depth: int = 3
    learning_rate: float = 0.1
    max_bins: int = 32
    l2: float = 1.0
    min_leaf: int = 5
    initial: float = 0.0
    trees: list = field(default_factory=list, repr=False)
    train_losses: list = field(default_factory=list, repr=False)

    def fit(self, X, y) -> "GradientBoostedTrees":
        X, y = _check_xy(X, y)
        if len(np.unique(y)) < 2:
            raise FitError("gradient boosting needs both classes")
        p = y.mean()
        self.initial = float(np.log(p / (1 - p)))
        builder = _TreeBuilder(X, self.max_bins, self.l2, self.min_leaf)
        F = np.full(len(y), self.initial)
        self.trees = []
        self.train_losses = [_log_loss(F, y)]
        for _ in range(self.n_trees):
            prob = _sigmoid(F)
            g = prob - y  # negative gradient is y - p
            h = prob * (1 - prob)
            tree = builder.build(g, h, self.max_depth)
            self.trees.append(tree)
            F = F + self.learning_rate * tree.predict(X)
            self.train_losses.append(_log_loss(F, y))
        return self

    def decision_function(self, X) -> np.ndarray:
        X = np.asarray(X, float)
        F = np.full(len(X), self.initial)
        for tree in self.trees:
            F = F + self.learning_rate * tree.predict(X)
        return F

    def predict_proba(self, X) -> np.ndarray:
        return _sigmoid(self.decision_function(X))

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X) > 0.5).astype(int)

    def to_dict(self) -> dict:
        return {
            "kind": "gbt",
            "learning_rate": self.learning_rate,
            "max_depth": self.max_depth,
            "initial": self.initial,
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d) -> "GradientBoostedTrees":
        m = cls(n_trees=len(d["trees"]), max_depth=d["max_depth"], learning_rate=d["learning_rate"])
        m.initial = d["initial"]
        m.trees = [Tree.from_dict(t) for t in d["trees"]]
        return m


def _log_loss(F, y) -> float:
    return float(np.mean(np.logaddexp(0.0, F) - y * F))


def gbt_fit(X, y, n_trees=200, depth=3, lr=0.1, **kw) -> GradientBoostedTrees:
    return GradientBoostedTrees(n_trees=n_trees, max_depth=depth, learning_rate=lr, **kw).fit(X, y)


def model_to_json(model) -> str:
    return json.dumps(model.to_dict(), sort_keys=True)
