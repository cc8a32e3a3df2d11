"""Trial and dataset schema, validation, and JSON Lines persistence.

A dataset file is one manifest line followed by one trial object per line.
Keys are written in sorted order and every float is formatted with nine
significant digits, so save -> load -> save is byte-identical.  Floats are
quantized to that precision when a trace or track is constructed, which makes
``load(save(d)) == d`` hold exactly.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, NamedTuple, Sequence

import numpy as np

SCHEMA_VERSION = 1

INSPECTION = "inspection"
MANIPULATION = "manipulation"
INTENTS = (INSPECTION, MANIPULATION)
MANIPULATION_KINDS = ("physical", "imaginary")
OBJECT_LABELS = ("banana", "bottle", "bowl", "cup", "doughnut", "orange")

GAZE_RATE_HZ = 120.0
VIDEO_RATE_HZ = 30.0


class DataError(Exception):
    pass


class SchemaError(DataError):
    pass


class LoadError(DataError):
    def __init__(self, message: str, line: int | None = None, trial_id: str | None = None):
        super().__init__(message)
        self.line = line
        self.trial_id = trial_id


def quantize(values) -> np.ndarray:
    """Round floats to the nine-significant-digit grid used on disk."""
    a = np.asarray(values, dtype=np.float64)
    if a.size == 0:
        return a.copy()
    flat = np.char.mod("%.9g", a.ravel()).astype(np.float64)
    return flat.reshape(a.shape)


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


class GazeSample(NamedTuple):
    t: float
    x: float
    y: float
    valid: bool


class ObjectDetection(NamedTuple):
    t: float
    label: str
    bbox: tuple[float, float, float, float]


@dataclass(frozen=True, eq=False)
class GazeTrace:
    """Columnar gaze samples. Invalid samples carry x = y = 0."""

    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "t", _frozen(quantize(self.t)))
        object.__setattr__(self, "x", _frozen(quantize(self.x)))
        object.__setattr__(self, "y", _frozen(quantize(self.y)))
        object.__setattr__(self, "valid", _frozen(np.asarray(self.valid, dtype=bool).copy()))
        n = len(self.t)
        if not (len(self.x) == len(self.y) == len(self.valid) == n):
            raise ValueError("gaze columns differ in length")

    @classmethod
    def from_samples(cls, samples: Sequence[GazeSample]) -> "GazeTrace":
        if not samples:
            return cls(np.zeros(0), np.zeros(0), np.zeros(0), np.zeros(0, bool))
        t, x, y, v = zip(*samples)
        return cls(np.array(t), np.array(x), np.array(y), np.array(v, dtype=bool))

    def __len__(self) -> int:
        return len(self.t)

    def __iter__(self) -> Iterator[GazeSample]:
        for i in range(len(self.t)):
            yield GazeSample(float(self.t[i]), float(self.x[i]), float(self.y[i]), bool(self.valid[i]))

    def __eq__(self, other) -> bool:
        if not isinstance(other, GazeTrace):
            return NotImplemented
        return all(np.array_equal(getattr(self, k), getattr(other, k)) for k in ("t", "x", "y", "valid"))

    def xy(self) -> np.ndarray:
        return np.column_stack([self.x, self.y])

    def select(self, idx) -> "GazeTrace":
        return GazeTrace(self.t[idx], self.x[idx], self.y[idx], self.valid[idx])


@dataclass(frozen=True, eq=False)
class Track:
    """Detections of one object class; ``bbox`` rows are (x_min, y_min, x_max, y_max)."""

    label: str
    t: np.ndarray
    bbox: np.ndarray

    def __post_init__(self):
        t = quantize(self.t)
        bbox = quantize(self.bbox).reshape(-1, 4) if len(t) else np.zeros((0, 4))
        if len(bbox) != len(t):
            raise ValueError("track columns differ in length")
        object.__setattr__(self, "t", _frozen(t))
        object.__setattr__(self, "bbox", _frozen(bbox))

    @classmethod
    def from_detections(cls, label: str, detections: Sequence[ObjectDetection]) -> "Track":
        t = [d.t for d in detections]
        bbox = [d.bbox for d in detections]
        return cls(label, np.array(t, dtype=float), np.array(bbox, dtype=float).reshape(-1, 4))

    def __len__(self) -> int:
        return len(self.t)

    def __iter__(self) -> Iterator[ObjectDetection]:
        for i in range(len(self.t)):
            yield ObjectDetection(float(self.t[i]), self.label, tuple(float(v) for v in self.bbox[i]))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Track):
            return NotImplemented
        return (
            self.label == other.label
            and np.array_equal(self.t, other.t)
            and np.array_equal(self.bbox, other.bbox)
        )

    def select(self, idx) -> "Track":
        return Track(self.label, self.t[idx], self.bbox[idx])


@dataclass(frozen=True)
class Trial:
    trial_id: str
    subject_id: str
    intent: str
    target_label: str
    instruction_end_t: float
    gaze: GazeTrace
    tracks: Mapping[str, Track]
    frame_size: tuple[int, int]
    manipulation_kind: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "instruction_end_t", float(quantize(self.instruction_end_t)))
        object.__setattr__(self, "frame_size", (int(self.frame_size[0]), int(self.frame_size[1])))
        object.__setattr__(self, "tracks", dict(sorted(self.tracks.items())))

    @property
    def target_track(self) -> Track:
        return self.tracks.get(self.target_label, Track(self.target_label, np.zeros(0), np.zeros((0, 4))))

    @property
    def label(self) -> int:
        """1 for manipulation, 0 for inspection."""
        return int(self.intent == MANIPULATION)


@dataclass(frozen=True)
class Dataset:
    trials: tuple[Trial, ...]
    subjects: tuple[str, ...]
    provenance: Mapping = field(default_factory=lambda: {"kind": "external"})

    def __post_init__(self):
        object.__setattr__(self, "trials", tuple(self.trials))
        object.__setattr__(self, "subjects", tuple(self.subjects))
        known = set(self.subjects)
        missing = sorted({tr.subject_id for tr in self.trials} - known)
        if missing:
            raise DataError(f"trials reference unknown subjects: {missing}")

    def __len__(self) -> int:
        return len(self.trials)

    @property
    def class_counts(self) -> dict[str, int]:
        counts = {k: 0 for k in INTENTS}
        for tr in self.trials:
            counts[tr.intent] = counts.get(tr.intent, 0) + 1
        return counts

    def by_subject(self) -> dict[str, list[Trial]]:
        out: dict[str, list[Trial]] = {s: [] for s in self.subjects}
        for tr in self.trials:
            out[tr.subject_id].append(tr)
        return out


# ---------------------------------------------------------------------------
# validation


class Violation(NamedTuple):
    code: str
    field: str
    rule: str


def validate_trial(trial: Trial) -> list[Violation]:
    out: list[Violation] = []
    if trial.intent not in INTENTS:
        out.append(Violation("MissingIntent", "intent", f"intent must be one of {INTENTS}"))
    if trial.manipulation_kind is not None:
        if trial.intent != MANIPULATION:
            out.append(Violation("BadManipulationKind", "manipulation_kind", "only manipulation trials carry a kind"))
        elif trial.manipulation_kind not in MANIPULATION_KINDS:
            out.append(Violation("BadManipulationKind", "manipulation_kind", f"kind must be one of {MANIPULATION_KINDS}"))
    w, h = trial.frame_size
    if w <= 0 or h <= 0:
        out.append(Violation("BadFrameSize", "frame_size", "width and height must be positive"))

    g = trial.gaze
    if len(g) == 0:
        out.append(Violation("MissingGaze", "gaze", "trial needs at least one gaze sample"))
    else:
        if not (np.all(np.isfinite(g.t)) and np.all(np.isfinite(g.x)) and np.all(np.isfinite(g.y))):
            out.append(Violation("NonFinite", "gaze", "gaze values must be finite"))
        if g.t[0] < 0:
            out.append(Violation("NegativeTime", "gaze.t", "t >= 0"))
        if np.any(np.diff(g.t) <= 0):
            out.append(Violation("NonMonotonicTime", "gaze.t", "timestamps strictly increasing"))
        bad = ~g.valid & ((g.x != 0) | (g.y != 0))
        if np.any(bad):
            out.append(Violation("InvalidSampleNotZeroed", "gaze", "invalid samples carry x = y = 0"))
        if not (0 <= trial.instruction_end_t <= g.t[-1]):
            out.append(Violation("InstructionEndOutOfRange", "instruction_end_t", "within [0, last gaze t]"))

    if trial.target_label not in OBJECT_LABELS:
        out.append(Violation("UnknownLabel", "target_label", f"label must be one of {OBJECT_LABELS}"))
    if len(trial.target_track) == 0:
        out.append(Violation("EmptyTargetTrack", "tracks", "target label needs a nonempty track"))
    for label, track in trial.tracks.items():
        name = f"tracks.{label}"
        if label not in OBJECT_LABELS or track.label != label:
            out.append(Violation("UnknownLabel", name, f"label must be one of {OBJECT_LABELS}"))
        if len(track) == 0:
            continue
        if not np.all(np.isfinite(track.bbox)) or not np.all(np.isfinite(track.t)):
            out.append(Violation("NonFinite", name, "detections must be finite"))
        if track.t[0] < 0:
            out.append(Violation("NegativeTime", name, "t >= 0"))
        if np.any(np.diff(track.t) <= 0):
            out.append(Violation("NonMonotonicTime", name, "detections sorted by strictly increasing t"))
        b = track.bbox
        if np.any(b[:, 0] >= b[:, 2]) or np.any(b[:, 1] >= b[:, 3]):
            out.append(Violation("DegenerateBBox", name, "x_min < x_max and y_min < y_max"))
    return out


# ---------------------------------------------------------------------------
# canonical JSON


def _fmt_float(v: float) -> str:
    if not math.isfinite(v):
        raise DataError(f"non-finite float {v!r} cannot be written")
    return format(v, ".9g")


def _fmt_array(a: np.ndarray) -> str:
    if a.size == 0:
        return "[]"
    if a.dtype == bool:
        return "[" + ",".join("1" if v else "0" for v in a.tolist()) + "]"
    if not np.all(np.isfinite(a)):
        raise DataError("non-finite float cannot be written")
    return "[" + ",".join(np.char.mod("%.9g", a).tolist()) + "]"


def canonical_json(obj) -> str:
    """Sorted keys, no whitespace, floats at nine significant digits."""
    if isinstance(obj, Mapping):
        items = sorted(obj.items())
        return "{" + ",".join(json.dumps(str(k)) + ":" + canonical_json(v) for k, v in items) + "}"
    if isinstance(obj, np.ndarray):
        if obj.ndim > 1:
            return "[" + ",".join(canonical_json(row) for row in obj) + "]"
        return _fmt_array(obj)
    if isinstance(obj, (list, tuple)):
        return "[" + ",".join(canonical_json(v) for v in obj) + "]"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _fmt_float(float(obj))
    if obj is None:
        return "null"
    if isinstance(obj, str):
        return json.dumps(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def trial_to_dict(trial: Trial) -> dict:
    g = trial.gaze
    return {
        "trial_id": trial.trial_id,
        "subject_id": trial.subject_id,
        "intent": trial.intent,
        "manipulation_kind": trial.manipulation_kind,
        "target_label": trial.target_label,
        "instruction_end_t": trial.instruction_end_t,
        "frame_size": list(trial.frame_size),
        "gaze": {"t": g.t, "x": g.x, "y": g.y, "valid": g.valid},
        "tracks": {k: {"t": tr.t, "bbox": tr.bbox} for k, tr in trial.tracks.items()},
    }


def trial_from_dict(d: Mapping) -> Trial:
    g = d["gaze"]
    gaze = GazeTrace(
        np.asarray(g["t"], dtype=float),
        np.asarray(g["x"], dtype=float),
        np.asarray(g["y"], dtype=float),
        np.asarray(g["valid"], dtype=bool),
    )
    tracks = {
        label: Track(label, np.asarray(v["t"], dtype=float), np.asarray(v["bbox"], dtype=float).reshape(-1, 4))
        for label, v in d["tracks"].items()
    }
    return Trial(
        trial_id=str(d["trial_id"]),
        subject_id=str(d["subject_id"]),
        intent=d["intent"],
        manipulation_kind=d.get("manipulation_kind"),
        target_label=d["target_label"],
        instruction_end_t=float(d["instruction_end_t"]),
        gaze=gaze,
        tracks=tracks,
        frame_size=tuple(d["frame_size"]),
    )


def save_dataset(dataset: Dataset, path) -> None:
    manifest = {
        "kind": "manifest",
        "schema_version": SCHEMA_VERSION,
        "provenance": dict(dataset.provenance),
        "subjects": list(dataset.subjects),
        "n_trials": len(dataset.trials),
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(canonical_json(manifest) + "\n")
        for trial in dataset.trials:
            fh.write(canonical_json(trial_to_dict(trial)) + "\n")


def read_manifest(line: str, expected_kind: str = "manifest") -> dict:
    try:
        manifest = json.loads(line)
    except json.JSONDecodeError as exc:
        raise LoadError(f"line 1: malformed manifest ({exc.msg})", line=1) from exc
    if not isinstance(manifest, dict) or manifest.get("kind") != expected_kind:
        raise SchemaError(f"line 1: expected a {expected_kind} record")
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise SchemaError(
            f"unsupported schema version {manifest.get('schema_version')!r} (expected {SCHEMA_VERSION})"
        )
    return manifest


def load_dataset(path) -> Dataset:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
        if not first:
            raise LoadError(f"{path}: empty file", line=1)
        manifest = read_manifest(first)
        trials = []
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                trial = trial_from_dict(json.loads(line))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise LoadError(f"{path}: line {lineno}: malformed trial record ({exc})", line=lineno) from exc
            violations = validate_trial(trial)
            if violations:
                codes = ", ".join(v.code for v in violations)
                raise LoadError(
                    f"{path}: line {lineno}: trial {trial.trial_id} failed validation ({codes})",
                    line=lineno,
                    trial_id=trial.trial_id,
                )
            trials.append(trial)
    try:
        return Dataset(tuple(trials), tuple(manifest["subjects"]), manifest.get("provenance", {"kind": "external"}))
    except DataError as exc:
        raise LoadError(f"{path}: {exc}") from exc
