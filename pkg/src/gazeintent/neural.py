"""Bidirectional LSTM + additive attention classifier with hand-written gradients.

Array layout is time-major: a batch is ``X`` of shape (T, B, C) with a
(T, B) boolean mask.  A masked timestep leaves the recurrent state unchanged
and is excluded from attention, so trailing padding has no effect on outputs.

Gate blocks inside every LSTM weight matrix are ordered (input, forget,
output, candidate) along the last axis.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

DENSE_SIZES = (32, 16, 2)
GATE_ORDER = ("input", "forget", "output", "candidate")


class NumericError(ArithmeticError):
    pass


class DivergenceError(NumericError):
    def __init__(self, epoch: int, message: str = ""):
        super().__init__(message or f"training loss became non-finite at epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True)
class MidasConfig:
    input_channels: int
    hidden_size: int = 32
    lstm_layers: int = 2
    attention_size: int | None = None  # defaults to hidden_size
    dense_sizes: tuple[int, ...] = DENSE_SIZES
    dropout: float = 0.0
    lr: float = 2.5e-4
    epochs: int = 30
    batch_size: int = 64
    min_len: int = 72
    max_len: int = 400
    dtype: str = "float64"

    def __post_init__(self):
        object.__setattr__(self, "dense_sizes", tuple(int(v) for v in self.dense_sizes))
        problems = []
        if self.input_channels < 1:
            problems.append("input_channels >= 1")
        if self.hidden_size < 1:
            problems.append("hidden_size >= 1")
        if self.lstm_layers < 1:
            problems.append("lstm_layers >= 1")
        if not self.dense_sizes or self.dense_sizes[-1] != 2:
            problems.append("dense output size == 2")
        for name in ("dropout", "lr"):
            if not 0 <= getattr(self, name) < 1:
                problems.append(f"{name} in [0, 1)")
        if not 1 <= self.min_len <= self.max_len:
            problems.append("1 <= min_len <= max_len")
        if self.dtype not in ("float32", "float64"):
            problems.append("dtype in {float32, float64}")
        if problems:
            raise ValueError("invalid MidasConfig: " + "; ".join(problems))

    @property
    def attn(self) -> int:
        return self.attention_size or self.hidden_size

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dense_sizes"] = list(self.dense_sizes)
        return d

    @classmethod
    def from_dict(cls, d) -> "MidasConfig":
        d = dict(d)
        d["dense_sizes"] = tuple(d.get("dense_sizes", DENSE_SIZES))
        return cls(**d)


def param_shapes(cfg: MidasConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Parameter names and shapes in blob order."""
    H = cfg.hidden_size
    shapes = []
    for layer in range(cfg.lstm_layers):
        n_in = cfg.input_channels if layer == 0 else 2 * H
        # leading axis stacks the (forward, backward) directions
        shapes += [
            (f"lstm{layer}.Wx", (2, n_in, 4 * H)),
            (f"lstm{layer}.Wh", (2, H, 4 * H)),
            (f"lstm{layer}.b", (2, 4 * H)),
        ]
    shapes += [("attn.W", (2 * H, cfg.attn)), ("attn.v", (cfg.attn,))]
    n_in = 2 * H
    for i, n_out in enumerate(cfg.dense_sizes):
        shapes += [(f"dense{i}.W", (n_in, n_out)), (f"dense{i}.b", (n_out,))]
        n_in = n_out
    return shapes


def _glorot(rng, shape, fan_in, fan_out):
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape)


@dataclass
class MidasModel:
    config: MidasConfig
    params: dict[str, np.ndarray]
    channel_mean: np.ndarray
    channel_std: np.ndarray
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    seed: int | None = None
    epoch: int = 0

    @classmethod
    def init(cls, cfg: MidasConfig, seed=0) -> "MidasModel":
        rng = np.random.default_rng(seed)
        H = cfg.hidden_size
        params = {}
        for name, shape in param_shapes(cfg):
            if name.endswith(".b") and name.startswith("lstm"):
                b = np.zeros(shape)
                b[:, H : 2 * H] = 1.0  # forget gate
                params[name] = b
            elif name.startswith("lstm") and name.endswith("Wx"):
                params[name] = _glorot(rng, shape, shape[1], 4 * H)
            elif name.startswith("lstm") and name.endswith("Wh"):
                params[name] = _glorot(rng, shape, H, 4 * H)
            elif name == "attn.v":
                params[name] = _glorot(rng, shape, shape[0], 1)
            elif name.endswith(".W"):
                params[name] = _glorot(rng, shape, shape[0], shape[1])
            else:
                params[name] = np.zeros(shape)
        C = cfg.input_channels
        return cls(cfg, params, np.zeros(C), np.ones(C), seed=seed)

    @classmethod
    def zeros(cls, cfg: MidasConfig) -> "MidasModel":
        params = {name: np.zeros(shape) for name, shape in param_shapes(cfg)}
        C = cfg.input_channels
        return cls(cfg, params, np.zeros(C), np.ones(C))

    def copy(self) -> "MidasModel":
        return MidasModel(
            self.config,
            {k: v.copy() for k, v in self.params.items()},
            self.channel_mean.copy(),
            self.channel_std.copy(),
            {k: v.copy() for k, v in self.adam_m.items()},
            {k: v.copy() for k, v in self.adam_v.items()},
            self.step,
            self.seed,
            self.epoch,
        )

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def flat(self) -> np.ndarray:
        return np.concatenate([self.params[n].ravel() for n, _ in param_shapes(self.config)])


# ---------------------------------------------------------------------------
# LSTM


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _bilstm_forward(X, M, Wx, Wh, b):
    """Both directions at once.

    X (T, B, n_in), M (T, B).  Returns (T, B, 2H) outputs and a cache.  The
    backward direction runs over the time-reversed sequence; with masked
    steps carrying state, trailing padding is simply skipped.
    """
    T, B, _ = X.shape
    H = Wh.shape[1]
    dt = X.dtype
    # sigmoid(z) = 0.5 tanh(z / 2) + 0.5, so the 1/2 is folded into the weights
    scale = np.ones(4 * H, dtype=dt)
    scale[: 3 * H] = 0.5
    Xs = np.stack([X, X[::-1]])  # (2, T, B, n)
    Ms = np.stack([M, M[::-1]])  # (2, T, B)
    Zx = np.matmul(Xs.reshape(2, T * B, -1), Wx * scale) + (b * scale)[:, None, :]
    Zx = Zx.reshape(2, T, B, 4 * H).transpose(1, 0, 2, 3).copy()  # (T, 2, B, 4H)
    Whs = Wh * scale
    gates = np.empty((T, 2, B, 4 * H), dtype=dt)
    hs = np.zeros((T + 1, 2, B, H), dtype=dt)
    cs = np.zeros((T + 1, 2, B, H), dtype=dt)
    tcs = np.empty((T, 2, B, H), dtype=dt)
    all_full = Ms.all(axis=(0, 2))
    Mf = Ms.transpose(1, 0, 2).astype(dt)[..., None]  # (T, 2, B, 1)
    shift = 0.5 * (scale < 1)
    tmp = np.empty((2, B, H), dtype=dt)
    for t in range(T):
        a = gates[t]
        np.matmul(hs[t], Whs, out=a)
        a += Zx[t]
        np.tanh(a, out=a)
        a *= scale
        a += shift
        i, f, o, g = a[..., :H], a[..., H : 2 * H], a[..., 2 * H : 3 * H], a[..., 3 * H :]
        c_new, h_new, tc = cs[t + 1], hs[t + 1], tcs[t]
        np.multiply(f, cs[t], out=c_new)
        np.multiply(i, g, out=tmp)
        c_new += tmp
        np.tanh(c_new, out=tc)
        np.multiply(o, tc, out=h_new)
        if not all_full[t]:
            m = Mf[t]
            # masked steps carry the previous state
            h_new -= hs[t]
            h_new *= m
            h_new += hs[t]
            c_new -= cs[t]
            c_new *= m
            c_new += cs[t]
    out = np.concatenate([hs[1:, 0], hs[1:, 1][::-1]], axis=-1)  # (T, B, 2H)
    cache = (Xs, Mf, all_full, gates, hs, cs, tcs, Wx, Wh)
    return out, cache


def _bilstm_backward(dout, cache):
    """Gradients w.r.t. input and (Wx, Wh, b) given dL/d(output) (T, B, 2H)."""
    Xs, Mf, all_full, gates, hs, cs, tcs, Wx, Wh = cache
    T, B = dout.shape[:2]
    H = Wh.shape[1]
    dt = dout.dtype
    dH = np.stack([dout[..., :H], dout[::-1, :, H:]], axis=1)  # (T, 2, B, H) in processing order
    # activation derivatives for all steps at once
    dact = gates * (1.0 - gates)
    dact[..., 3 * H :] = 1.0 - gates[..., 3 * H :] ** 2
    dtc = 1.0 - tcs * tcs
    dZ = np.empty((T, 2, B, 4 * H), dtype=dt)
    dh = np.zeros((2, B, H), dtype=dt)
    dc = np.zeros((2, B, H), dtype=dt)
    tmp = np.empty((2, B, H), dtype=dt)
    WhT = np.ascontiguousarray(np.swapaxes(Wh, 1, 2))
    for t in range(T - 1, -1, -1):
        dh += dH[t]
        a = gates[t]
        i, f, o, g = a[..., :H], a[..., H : 2 * H], a[..., 2 * H : 3 * H], a[..., 3 * H :]
        full = all_full[t]
        if full:
            dh_new, dc_new = dh, dc
        else:
            m = Mf[t]
            dh_keep, dc_keep = dh * (1.0 - m), dc * (1.0 - m)
            dh_new, dc_new = dh * m, dc * m
        # dc_new accumulates the path through h = o * tanh(c)
        np.multiply(dh_new, o, out=tmp)
        tmp *= dtc[t]
        dc_new += tmp
        dz = dZ[t]
        np.multiply(dc_new, g, out=dz[..., :H])
        np.multiply(dc_new, cs[t], out=dz[..., H : 2 * H])
        np.multiply(dh_new, tcs[t], out=dz[..., 2 * H : 3 * H])
        np.multiply(dc_new, i, out=dz[..., 3 * H :])
        dz *= dact[t]
        if full:
            np.matmul(dz, WhT, out=dh)
            np.multiply(dc_new, f, out=dc)
        else:
            dh = dh_keep + np.matmul(dz, WhT)
            dc = dc_keep + dc_new * f
    # weight gradients as single large products
    dZs = np.swapaxes(dZ, 0, 1).reshape(2, T * B, 4 * H)
    Hprev = np.swapaxes(hs[:-1], 0, 1).reshape(2, T * B, H)
    Xflat = Xs.reshape(2, T * B, -1)
    dWx = np.matmul(np.swapaxes(Xflat, 1, 2), dZs)
    dWh = np.matmul(np.swapaxes(Hprev, 1, 2), dZs)
    db = dZs.sum(axis=1)
    dXs = np.matmul(dZs, np.swapaxes(Wx, 1, 2)).reshape(2, T, B, -1)
    dX = dXs[0] + dXs[1][::-1]
    return dX, dWx, dWh, db


def lstm_forward(params: dict, X: np.ndarray, mask: np.ndarray, direction: int = 0) -> np.ndarray:
    """Single-direction LSTM over one (T x C) sequence; returns T x H hidden states."""
    X = np.asarray(X, float)
    if not np.all(np.isfinite(X)):
        raise NumericError("non-finite input")
    out, _ = _bilstm_forward(X[:, None, :], np.asarray(mask, bool)[:, None], params["Wx"], params["Wh"], params["b"])
    H = params["Wh"].shape[1]
    return out[:, 0, :H] if direction == 0 else out[:, 0, H:]


def bilstm_forward(params: dict, X: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """T x C sequence -> T x 2H concatenated (forward, backward) states."""
    X = np.asarray(X, float)
    if not np.all(np.isfinite(X)):
        raise NumericError("non-finite input")
    out, _ = _bilstm_forward(X[:, None, :], np.asarray(mask, bool)[:, None], params["Wx"], params["Wh"], params["b"])
    return out[:, 0]


# ---------------------------------------------------------------------------
# attention


def _attention_forward(Hs, M, W, v):
    """Hs (T, B, D), M (T, B) -> context (B, D), weights (T, B)."""
    U = np.tanh(np.matmul(Hs, W))
    e = U @ v
    e = np.where(M, e, -np.inf)
    emax = e.max(axis=0, keepdims=True)
    emax = np.where(np.isfinite(emax), emax, 0.0)
    w = np.exp(e - emax)
    denom = w.sum(axis=0, keepdims=True)
    alpha = np.divide(w, denom, out=np.zeros_like(w), where=denom > 0)
    ctx = np.einsum("tb,tbd->bd", alpha, Hs)
    return ctx, alpha, (Hs, U, alpha, W, v, M)


def _attention_backward(dctx, cache):
    Hs, U, alpha, W, v, M = cache
    dH = alpha[..., None] * dctx[None]
    dalpha = np.einsum("tbd,bd->tb", Hs, dctx)
    de = alpha * (dalpha - (alpha * dalpha).sum(axis=0, keepdims=True))
    de = np.where(M, de, 0.0)
    dv = np.einsum("tba,tb->a", U, de)
    dpre = de[..., None] * v * (1.0 - U * U)
    D = Hs.shape[-1]
    dW = Hs.reshape(-1, D).T @ dpre.reshape(-1, dpre.shape[-1])
    dH = dH + np.matmul(dpre, W.T)
    return dH, dW, dv


def attention_forward(hidden: np.ndarray, mask: np.ndarray, W: np.ndarray, v: np.ndarray):
    """Single sequence: hidden (T x D) -> (context D, weights T)."""
    ctx, alpha, _ = _attention_forward(np.asarray(hidden, float)[:, None, :], np.asarray(mask, bool)[:, None], W, v)
    return ctx[0], alpha[:, 0]


# ---------------------------------------------------------------------------
# full model


def standardize(model: MidasModel, X: np.ndarray, M: np.ndarray, channel_masks: np.ndarray | None = None) -> np.ndarray:
    dt = np.dtype(model.config.dtype)
    Z = (X - model.channel_mean) / model.channel_std
    valid = M[..., None] if channel_masks is None else channel_masks
    return np.where(valid, Z, 0.0).astype(dt, copy=False)


def fit_standardization(model: MidasModel, X: np.ndarray, CM: np.ndarray) -> None:
    """Per-channel mean/std over valid entries of (T, B, C) arrays."""
    C = X.shape[-1]
    mean = np.zeros(C)
    std = np.ones(C)
    for j in range(C):
        v = X[..., j][CM[..., j]]
        if v.size:
            mean[j] = v.mean()
            s = v.std()
            std[j] = s if s > 1e-12 else 1.0
    model.channel_mean, model.channel_std = mean, std


def _forward(model: MidasModel, X: np.ndarray, M: np.ndarray, dtype=None):
    """X already standardized, (T, B, C).  Returns sigmoid outputs (B, 2) and caches."""
    cfg = model.config
    p = model.params
    dt = np.dtype(dtype or cfg.dtype)
    caches = []
    h = X.astype(dt, copy=False)
    for layer in range(cfg.lstm_layers):
        h, cache = _bilstm_forward(
            h, M, p[f"lstm{layer}.Wx"].astype(dt), p[f"lstm{layer}.Wh"].astype(dt), p[f"lstm{layer}.b"].astype(dt)
        )
        caches.append(cache)
    ctx, alpha, acache = _attention_forward(h, M, p["attn.W"].astype(dt), p["attn.v"].astype(dt))
    acts = [ctx]
    a = ctx
    n = len(cfg.dense_sizes)
    for i in range(n):
        z = a @ p[f"dense{i}.W"].astype(dt) + p[f"dense{i}.b"].astype(dt)
        a = _sigmoid(z) if i == n - 1 else np.maximum(z, 0.0)
        acts.append(a)
    return a, (caches, acache, acts, alpha)


def bce_loss(out: np.ndarray, y: np.ndarray) -> float:
    """Mean over batch and both outputs of binary cross-entropy against one-hot labels."""
    Y = np.stack([1 - y, y], axis=1).astype(out.dtype)
    eps = 1e-12
    loss = -np.mean(Y * np.log(np.maximum(out, eps)) + (1 - Y) * np.log(np.maximum(1 - out, eps)))
    return loss if out.dtype == np.longdouble else float(loss)


def _backward(model: MidasModel, out, y, state):
    cfg = model.config
    p = model.params
    dt = out.dtype
    caches, acache, acts, _ = state
    grads = {}
    Y = np.stack([1 - y, y], axis=1).astype(dt)
    n = len(cfg.dense_sizes)
    dz = (out - Y) / out.size  # sigmoid + BCE
    for i in range(n - 1, -1, -1):
        a_in = acts[i]
        grads[f"dense{i}.W"] = a_in.T @ dz
        grads[f"dense{i}.b"] = dz.sum(axis=0)
        da = dz @ p[f"dense{i}.W"].astype(dt).T
        if i > 0:
            dz = da * (acts[i] > 0)
    dctx = da
    dH, grads["attn.W"], grads["attn.v"] = _attention_backward(dctx, acache)
    for layer in range(cfg.lstm_layers - 1, -1, -1):
        dH, dWx, dWh, db = _bilstm_backward(dH, caches[layer])
        grads[f"lstm{layer}.Wx"], grads[f"lstm{layer}.Wh"], grads[f"lstm{layer}.b"] = dWx, dWh, db
    return {k: v.astype(np.float64) for k, v in grads.items()}


@dataclass
class Batch:
    """Standardized time-major inputs with labels."""

    X: np.ndarray  # (T, B, C)
    M: np.ndarray  # (T, B)
    y: np.ndarray  # (B,)

    def truncate(self, length: int) -> "Batch":
        return Batch(self.X[:length], self.M[:length], self.y)

    def take(self, idx) -> "Batch":
        return Batch(self.X[:, idx], self.M[:, idx], self.y[idx])


def make_batch(model: MidasModel, series: Sequence, labels=None) -> Batch:
    """Stack FeatureSeries into a standardized time-major batch."""
    X = np.stack([fs.values for fs in series], axis=1)
    M = np.stack([fs.mask for fs in series], axis=1)
    CM = np.stack([fs.channel_masks for fs in series], axis=1)
    y = np.zeros(len(series), dtype=int) if labels is None else np.asarray(labels, int)
    if not np.all(np.isfinite(X)):
        raise NumericError("non-finite input")
    return Batch(standardize(model, X, M, CM), M, y)


def forward(model: MidasModel, batch: Batch) -> np.ndarray:
    """Per-trial sigmoid output pairs (B, 2)."""
    if not np.all(np.isfinite(batch.X)):
        raise NumericError("non-finite input")
    out, _ = _forward(model, batch.X, batch.M)
    return out


def loss_and_grads(model: MidasModel, batch: Batch):
    out, state = _forward(model, batch.X, batch.M)
    loss = bce_loss(out, batch.y)
    return loss, _backward(model, out, batch.y, state)


def backward(model: MidasModel, batch: Batch, labels=None) -> dict[str, np.ndarray]:
    if labels is not None:
        batch = Batch(batch.X, batch.M, np.asarray(labels, int))
    return loss_and_grads(model, batch)[1]


def predict(model: MidasModel, batch: Batch, chunk: int = 256) -> np.ndarray:
    """Argmax of the two outputs; an exact tie gives class 0 (inspection)."""
    preds = []
    for s in range(0, batch.X.shape[1], chunk):
        out = forward(model, batch.take(slice(s, s + chunk)))
        preds.append((out[:, 1] > out[:, 0]).astype(int))
    return np.concatenate(preds) if preds else np.zeros(0, int)


# ---------------------------------------------------------------------------
# optimization


def adam_step(model: MidasModel, grads: dict, lr: float = 2.5e-4, beta1=0.9, beta2=0.999, eps=1e-8) -> MidasModel:
    """In-place bias-corrected Adam update; returns the model for chaining."""
    model.step += 1
    t = model.step
    for name, g in grads.items():
        m = model.adam_m.get(name)
        if m is None:
            m = model.adam_m[name] = np.zeros_like(g)
            model.adam_v[name] = np.zeros_like(g)
        v = model.adam_v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        mhat = m / (1 - beta1**t)
        vhat = v / (1 - beta2**t)
        model.params[name] = model.params[name] - lr * mhat / (np.sqrt(vhat) + eps)
    return model


def grad_check(model: MidasModel, batch: Batch, eps: float = 1e-5, max_params: int | None = None, seed=0):
    """Max relative error between analytic and central-difference gradients.

    Every parameter is checked unless ``max_params`` is set, in which case a
    seeded random subset of that size is used.
    """
    if np.dtype(model.config.dtype) != np.float64:
        raise ValueError("gradient checks need float64")
    _, grads = loss_and_grads(model, batch)

    def loss_ext():
        # finite differences in extended precision keep roundoff far below the
        # size of the smallest gradients being checked
        out, _ = _forward(model, batch.X.astype(np.longdouble), batch.M, dtype=np.longdouble)
        return bce_loss(out, batch.y)

    entries = [(name, idx) for name, _ in param_shapes(model.config) for idx in np.ndindex(model.params[name].shape)]
    if max_params is not None and max_params < len(entries):
        rng = np.random.default_rng(seed)
        pick = np.sort(rng.choice(len(entries), max_params, replace=False))
        entries = [entries[i] for i in pick]
    worst = 0.0
    for name, idx in entries:
        p = model.params[name]
        old = p[idx]
        p[idx] = old + eps
        lp = loss_ext()
        p[idx] = old - eps
        lm = loss_ext()
        p[idx] = old
        num = float((lp - lm) / ((old + eps) - (old - eps)))
        ana = grads[name][idx]
        err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
        worst = max(worst, err)
    return worst


@dataclass
class TrainLog:
    losses: list[float] = field(default_factory=list)
    val_losses: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)


def train(cfg: MidasConfig, train_series, train_labels, val_series=None, val_labels=None, seed=0, model=None):
    """Mini-batch Adam with per-batch random truncation; deterministic given ``seed``."""
    rng = np.random.default_rng([int(np.atleast_1d(seed)[0]) if np.ndim(seed) else int(seed), 11])
    if model is None:
        model = MidasModel.init(cfg, seed=seed)
        X = np.stack([fs.values for fs in train_series], axis=1)
        CM = np.stack([fs.channel_masks for fs in train_series], axis=1)
        fit_standardization(model, X, CM)
    data = make_batch(model, train_series, train_labels)
    val = make_batch(model, val_series, val_labels) if val_series is not None else None
    n = len(data.y)
    T = data.X.shape[0]
    log = TrainLog()
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for s in range(0, n, cfg.batch_size):
            idx = order[s : s + cfg.batch_size]
            length = int(rng.integers(cfg.min_len, min(cfg.max_len, T) + 1))
            batch = data.take(idx).truncate(length)
            loss, grads = loss_and_grads(model, batch)
            if not math.isfinite(loss):
                raise DivergenceError(epoch)
            adam_step(model, grads, lr=cfg.lr)
            total += loss * len(idx)
        log.losses.append(total / n)
        model.epoch = epoch
        if val is not None:
            out = np.concatenate([forward(model, val.take(slice(s, s + 256))) for s in range(0, len(val.y), 256)])
            log.val_losses.append(bce_loss(out, val.y))
            log.val_accuracy.append(float(np.mean((out[:, 1] > out[:, 0]).astype(int) == val.y)))
    return model, log


# ---------------------------------------------------------------------------
# checkpoints


def _blob_layout(model: MidasModel) -> list[tuple[str, tuple[int, ...]]]:
    shapes = param_shapes(model.config)
    layout = [(f"param/{n}", s) for n, s in shapes]
    if model.adam_m:
        layout += [(f"adam_m/{n}", s) for n, s in shapes] + [(f"adam_v/{n}", s) for n, s in shapes]
    C = model.config.input_channels
    layout += [("standardize/mean", (C,)), ("standardize/std", (C,))]
    return layout


def save_checkpoint(model: MidasModel, path) -> tuple[Path, Path]:
    """Write ``<path>`` (JSON manifest) and ``<path>.bin`` (little-endian float64 blob)."""
    path = Path(path)
    blob_path = path.with_name(path.name + ".bin")
    layout = _blob_layout(model)
    arrays = []
    for key, shape in layout:
        group, name = key.split("/", 1)
        src = {
            "param": model.params,
            "adam_m": model.adam_m,
            "adam_v": model.adam_v,
        }.get(group)
        if src is not None:
            arrays.append(np.asarray(src[name], dtype="<f8").ravel())
        else:
            arrays.append(np.asarray(model.channel_mean if name == "mean" else model.channel_std, dtype="<f8"))
    blob = np.concatenate(arrays).astype("<f8")
    manifest = {
        "kind": "midas_checkpoint",
        "config": model.config.to_dict(),
        "seed": None if model.seed is None else [int(v) for v in np.atleast_1d(model.seed)],
        "epoch": model.epoch,
        "adam_step": model.step,
        "gate_order": list(GATE_ORDER),
        "layout": [[k, list(s)] for k, s in layout],
        "blob": blob_path.name,
        "n_values": int(blob.size),
    }
    path.write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    blob_path.write_bytes(blob.tobytes())
    return path, blob_path


def load_checkpoint(path) -> MidasModel:
    path = Path(path)
    manifest = json.loads(path.read_text(encoding="utf-8"))
    if manifest.get("kind") != "midas_checkpoint":
        raise ValueError(f"{path} is not a checkpoint manifest")
    cfg = MidasConfig.from_dict(manifest["config"])
    blob = np.frombuffer((path.parent / manifest["blob"]).read_bytes(), dtype="<f8")
    if blob.size != manifest["n_values"]:
        raise ValueError("checkpoint blob size does not match manifest")
    model = MidasModel.zeros(cfg)
    model.seed = manifest.get("seed")
    model.epoch = manifest.get("epoch", 0)
    model.step = manifest.get("adam_step", 0)
    pos = 0
    for key, shape in manifest["layout"]:
        size = int(np.prod(shape)) if shape else 1
        arr = blob[pos : pos + size].reshape(shape).astype(np.float64)
        pos += size
        group, name = key.split("/", 1)
        if group == "param":
            model.params[name] = arr
        elif group == "adam_m":
            model.adam_m[name] = arr
        elif group == "adam_v":
            model.adam_v[name] = arr
        elif name == "mean":
            model.channel_mean = arr
        else:
            model.channel_std = arr
    return model
