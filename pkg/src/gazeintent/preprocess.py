"""Track interpolation, post-instruction cropping, and feature channels."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataio import (
    GAZE_RATE_HZ,
    SCHEMA_VERSION,
    DataError,
    LoadError,
    Trial,
    canonical_json,
    quantize,
    read_manifest,
)

CROP_LENGTH = 400
MAX_FILL_GAP = 100  # gaze samples; only strictly shorter gaps are interpolated
HIST_BINS = 32

CHANNELS = ("gaze_x", "gaze_y", "target_x", "target_y", "target_w", "target_h", "distance", "speed")

FEATURE_SETS = {
    "raw": ("gaze_x", "gaze_y"),
    "raw+target": ("gaze_x", "gaze_y", "target_x", "target_y", "target_w", "target_h"),
    "distance": ("distance",),
    "speed": ("speed",),
    "all": CHANNELS,
    "hist-dist": ("distance",),
    "hist-speed": ("speed",),
}
HISTOGRAM_SETS = {"hist-dist", "hist-speed"}


class EmptyWindow(DataError):
    pass


@dataclass(frozen=True, eq=False)
class FeatureSeries:
    """T x C channel matrix with a per-sample validity mask. Masked entries are zero."""

    channels: tuple[str, ...]
    values: np.ndarray
    mask: np.ndarray
    sample_rate: float = GAZE_RATE_HZ
    crop_length: int = CROP_LENGTH
    channel_masks: np.ndarray | None = None  # T x C; defaults to ``mask`` for every channel

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64).reshape(len(self.mask), len(self.channels))
        mask = np.asarray(self.mask, dtype=bool)
        cm = mask[:, None].repeat(len(self.channels), 1) if self.channel_masks is None else np.asarray(self.channel_masks, bool)
        values = np.where(cm, values, 0.0)
        object.__setattr__(self, "channels", tuple(self.channels))
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "channel_masks", cm)

    def __len__(self) -> int:
        return len(self.mask)

    def __eq__(self, other) -> bool:
        if not isinstance(other, FeatureSeries):
            return NotImplemented
        return (
            self.channels == other.channels
            and np.array_equal(self.values, other.values)
            and np.array_equal(self.mask, other.mask)
            and np.array_equal(self.channel_masks, other.channel_masks)
            and self.sample_rate == other.sample_rate
        )

    def channel(self, name: str) -> np.ndarray:
        return self.values[:, self.channels.index(name)]

    def channel_mask(self, name: str) -> np.ndarray:
        return self.channel_masks[:, self.channels.index(name)]

    def select(self, names: Sequence[str]) -> "FeatureSeries":
        idx = [self.channels.index(n) for n in names]
        return FeatureSeries(
            tuple(names), self.values[:, idx], self.mask, self.sample_rate, self.crop_length, self.channel_masks[:, idx]
        )

    def truncate(self, length: int) -> "FeatureSeries":
        return FeatureSeries(
            self.channels, self.values[:length], self.mask[:length], self.sample_rate, length, self.channel_masks[:length]
        )


@dataclass(frozen=True, eq=False)
class HistogramFeature:
    bins: int
    range: tuple[float, float]
    counts: np.ndarray
    empty: bool = False

    @property
    def flag(self) -> str | None:
        return "EmptyHistogram" if self.empty else None

    def __eq__(self, other) -> bool:
        if not isinstance(other, HistogramFeature):
            return NotImplemented
        return self.bins == other.bins and self.range == other.range and np.array_equal(self.counts, other.counts)


# ---------------------------------------------------------------------------
# interpolation and cropping


def interpolate_track(track, gaze_t: np.ndarray, max_gap: int = MAX_FILL_GAP) -> tuple[np.ndarray, np.ndarray]:
    """Resample a bbox track onto the gaze clock.

    Gaze samples strictly between two consecutive detections are linearly
    interpolated (in time, per corner) when fewer than ``max_gap`` of them lie
    in between; longer gaps and samples before the first or after the last
    detection stay masked.  Returns (T x 4 bboxes, validity mask).
    """
    gaze_t = np.asarray(gaze_t, dtype=float)
    out = np.zeros((len(gaze_t), 4))
    valid = np.zeros(len(gaze_t), dtype=bool)
    det_t = np.asarray(track.t, dtype=float)
    if len(det_t) == 0 or len(gaze_t) == 0:
        return out, valid
    boxes = np.asarray(track.bbox, dtype=float)
    # right: index of the first detection with det_t >= gaze t
    right = np.searchsorted(det_t, gaze_t, side="left")
    exact = (right < len(det_t)) & (det_t[np.minimum(right, len(det_t) - 1)] == gaze_t)
    out[exact] = boxes[right[exact]]
    valid[exact] = True

    inner = ~exact & (right > 0) & (right < len(det_t))
    if np.any(inner):
        # gaze samples strictly inside each inter-detection interval
        lo_idx = np.searchsorted(gaze_t, det_t, side="right")  # first sample with t > det_t
        hi_idx = np.searchsorted(gaze_t, det_t, side="left")  # first sample with t >= det_t
        n_between = hi_idx[1:] - lo_idx[:-1]  # per interval k = (det k, det k+1)
        k = right[inner] - 1
        fill = n_between[k] < max_gap
        t0, t1 = det_t[k], det_t[k + 1]
        w = ((gaze_t[inner] - t0) / (t1 - t0))[:, None]
        vals = boxes[k] + w * (boxes[k + 1] - boxes[k])
        rows = np.flatnonzero(inner)
        out[rows[fill]] = vals[fill]
        valid[rows[fill]] = True
    return out, valid


def crop_trial(trial: Trial, length: int = CROP_LENGTH) -> Trial:
    """Keep ``length`` gaze samples from the first one at or after instruction end.

    Detections outside the window's time span are dropped, so features of the
    cropped trial depend only on post-instruction content.  Cropping a cropped
    trial returns an equal trial.
    """
    g = trial.gaze
    start = int(np.searchsorted(g.t, trial.instruction_end_t, side="left"))
    if start >= len(g):
        raise EmptyWindow(f"trial {trial.trial_id} has no samples after instruction end")
    idx = np.arange(start, min(start + length, len(g)))
    gaze = g.select(idx)
    t0, t1 = gaze.t[0], gaze.t[-1]
    tracks = {}
    for label, tr in trial.tracks.items():
        keep = (tr.t >= t0) & (tr.t <= t1)
        if label == trial.target_label or np.any(keep):
            tracks[label] = tr.select(keep)
    return Trial(
        trial_id=trial.trial_id,
        subject_id=trial.subject_id,
        intent=trial.intent,
        manipulation_kind=trial.manipulation_kind,
        target_label=trial.target_label,
        instruction_end_t=float(t0),
        gaze=gaze,
        tracks=tracks,
        frame_size=trial.frame_size,
    )


# ---------------------------------------------------------------------------
# channels


def speed_series(xy: np.ndarray, valid: np.ndarray, sample_rate: float = GAZE_RATE_HZ) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample gaze speed (px/s) between consecutive samples, right-padded to keep length."""
    xy = np.asarray(xy, dtype=float)
    valid = np.asarray(valid, dtype=bool)
    n = len(valid)
    speed = np.zeros(n)
    ok = np.zeros(n, dtype=bool)
    if n >= 2:
        pair = valid[:-1] & valid[1:]
        d = np.hypot(*(xy[1:] - xy[:-1]).T) * sample_rate
        speed[:-1] = np.where(pair, d, 0.0)
        ok[:-1] = pair
    return speed, ok


def distance_series(xy, valid, bbox, bbox_valid) -> tuple[np.ndarray, np.ndarray]:
    """Euclidean distance from gaze to bbox centre; masked where either input is."""
    xy = np.asarray(xy, dtype=float)
    bbox = np.asarray(bbox, dtype=float)
    ok = np.asarray(valid, bool) & np.asarray(bbox_valid, bool)
    cx = (bbox[:, 0] + bbox[:, 2]) / 2
    cy = (bbox[:, 1] + bbox[:, 3]) / 2
    d = np.hypot(xy[:, 0] - cx, xy[:, 1] - cy)
    return np.where(ok, d, 0.0), ok


def normalize_to_bbox(point, bbox) -> tuple[float, float, bool]:
    """(u, v, on_target) with u, v in bbox units; (0, 0) is the top-left corner."""
    x, y = point
    x0, y0, x1, y1 = bbox
    if not (x1 > x0 and y1 > y0):
        raise ValueError("degenerate bbox")
    u = (x - x0) / (x1 - x0)
    v = (y - y0) / (y1 - y0)
    return u, v, bool(0.0 <= u <= 1.0 and 0.0 <= v <= 1.0)


def normalize_points(xy: np.ndarray, bbox: np.ndarray) -> np.ndarray:
    """Vectorized bbox normalization; rows of ``bbox`` align with rows of ``xy``."""
    w = bbox[:, 2] - bbox[:, 0]
    h = bbox[:, 3] - bbox[:, 1]
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.column_stack([(xy[:, 0] - bbox[:, 0]) / w, (xy[:, 1] - bbox[:, 1]) / h])


def trial_features(trial: Trial, length: int = CROP_LENGTH) -> FeatureSeries:
    """Crop a trial and derive every channel, zero-padded to ``length`` samples."""
    win = crop_trial(trial, length)
    g = win.gaze
    n = len(g)
    xy = g.xy()
    bbox, bvalid = interpolate_track(win.target_track, g.t)
    speed, s_ok = speed_series(xy, g.valid)
    dist, d_ok = distance_series(xy, g.valid, bbox, bvalid)
    cols = np.column_stack(
        [
            g.x,
            g.y,
            (bbox[:, 0] + bbox[:, 2]) / 2,
            (bbox[:, 1] + bbox[:, 3]) / 2,
            bbox[:, 2] - bbox[:, 0],
            bbox[:, 3] - bbox[:, 1],
            dist,
            speed,
        ]
    )
    cmask = np.column_stack([g.valid, g.valid, bvalid, bvalid, bvalid, bvalid, d_ok, s_ok])
    values = np.zeros((length, len(CHANNELS)))
    masks = np.zeros((length, len(CHANNELS)), dtype=bool)
    values[:n] = quantize(cols)  # on the on-disk grid so feature files round-trip exactly
    masks[:n] = cmask
    mask = np.zeros(length, dtype=bool)
    mask[:n] = g.valid
    return FeatureSeries(CHANNELS, values, mask, GAZE_RATE_HZ, length, masks)


def on_target_points(fs: FeatureSeries) -> np.ndarray:
    """Bbox-normalized gaze points that fall inside the target bbox (N x 2)."""
    ok = fs.channel_mask("gaze_x") & fs.channel_mask("target_x")
    if not np.any(ok):
        return np.zeros((0, 2))
    cx, cy = fs.channel("target_x")[ok], fs.channel("target_y")[ok]
    w, h = fs.channel("target_w")[ok], fs.channel("target_h")[ok]
    bbox = np.column_stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2])
    uv = normalize_points(np.column_stack([fs.channel("gaze_x")[ok], fs.channel("gaze_y")[ok]]), bbox)
    inside = np.all((uv >= 0.0) & (uv <= 1.0), axis=1)
    return uv[inside]


# ---------------------------------------------------------------------------
# histograms


def histogram(values, mask=None, bins: int = HIST_BINS, range: tuple[float, float] = (0.0, 1.0)) -> HistogramFeature:
    """Normalized histogram over unmasked values; out-of-range values land in the edge bins."""
    lo, hi = range
    if not lo < hi:
        raise ValueError("histogram range needs lo < hi")
    v = np.asarray(values, dtype=float)
    if mask is not None:
        v = v[np.asarray(mask, bool)]
    if v.size == 0:
        return HistogramFeature(bins, (lo, hi), np.zeros(bins), empty=True)
    idx = np.floor((v - lo) / (hi - lo) * bins).astype(np.int64)
    idx = np.clip(idx, 0, bins - 1)
    counts = np.bincount(idx, minlength=bins).astype(float)
    return HistogramFeature(bins, (lo, hi), counts / counts.sum())


@dataclass
class HistogramFeaturizer:
    """Fixed-edge histograms over one channel; the range is frozen at fit time."""

    channel: str
    bins: int = HIST_BINS
    range: tuple[float, float] | None = None
    frame_size: tuple[int, int] | None = None
    percentile: float = 99.5

    def fit(self, series: Sequence[FeatureSeries]) -> "HistogramFeaturizer":
        if self.channel == "distance":
            if self.frame_size is None:
                raise ValueError("distance histograms need the frame size")
            self.range = (0.0, float(np.hypot(*self.frame_size)))
        else:
            vals = np.concatenate([fs.channel(self.channel)[fs.channel_mask(self.channel)] for fs in series])
            hi = float(np.percentile(vals, self.percentile)) if vals.size else 1.0
            self.range = (0.0, hi if hi > 0 else 1.0)
        return self

    def transform(self, series: Sequence[FeatureSeries]) -> np.ndarray:
        if self.range is None:
            raise RuntimeError("featurizer not fitted")
        return np.array(
            [histogram(fs.channel(self.channel), fs.channel_mask(self.channel), self.bins, self.range).counts for fs in series]
        )


# ---------------------------------------------------------------------------
# feature files


@dataclass
class FeatureRecord:
    trial_id: str
    subject_id: str
    label: int
    series: FeatureSeries
    intent: str = ""


@dataclass
class FeatureFile:
    feature_set: str
    records: list[FeatureRecord]
    frame_size: tuple[int, int]
    provenance: dict = field(default_factory=dict)


def build_features(dataset, feature_set: str, length: int = CROP_LENGTH) -> FeatureFile:
    if feature_set not in FEATURE_SETS:
        raise ValueError(f"unknown feature set {feature_set!r}; expected one of {sorted(FEATURE_SETS)}")
    names = FEATURE_SETS[feature_set]
    records = []
    frame = None
    for trial in dataset.trials:
        fs = trial_features(trial, length).select(names)
        records.append(FeatureRecord(trial.trial_id, trial.subject_id, trial.label, fs, trial.intent))
        frame = trial.frame_size
    return FeatureFile(feature_set, records, frame or (0, 0), dict(dataset.provenance))


def save_features(ff: FeatureFile, path) -> None:
    channels = ff.records[0].series.channels if ff.records else FEATURE_SETS[ff.feature_set]
    manifest = {
        "kind": "features",
        "schema_version": SCHEMA_VERSION,
        "feature_set": ff.feature_set,
        "channels": list(channels),
        "frame_size": list(ff.frame_size),
        "provenance": ff.provenance,
        "n_records": len(ff.records),
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(canonical_json(manifest) + "\n")
        for r in ff.records:
            s = r.series
            rec = {
                "trial_id": r.trial_id,
                "subject_id": r.subject_id,
                "label": r.label,
                "intent": r.intent,
                "sample_rate": s.sample_rate,
                "crop_length": s.crop_length,
                "values": s.values.T,
                "channel_masks": s.channel_masks.T,
                "mask": s.mask,
            }
            fh.write(canonical_json(rec) + "\n")


def load_features(path) -> FeatureFile:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
        if not first:
            raise LoadError(f"{path}: empty file", line=1)
        manifest = read_manifest(first, expected_kind="features")
        channels = tuple(manifest["channels"])
        records = []
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                mask = np.asarray(d["mask"], dtype=bool)
                values = np.asarray(d["values"], dtype=float).reshape(len(channels), len(mask)).T
                cm = np.asarray(d["channel_masks"], dtype=bool).reshape(len(channels), len(mask)).T
                fs = FeatureSeries(channels, values, mask, float(d["sample_rate"]), int(d["crop_length"]), cm)
                records.append(FeatureRecord(str(d["trial_id"]), str(d["subject_id"]), int(d["label"]), fs, d.get("intent", "")))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise LoadError(f"{path}: line {lineno}: malformed feature record ({exc})", line=lineno) from exc
    return FeatureFile(manifest["feature_set"], records, tuple(manifest["frame_size"]), manifest.get("provenance", {}))
