"""Seeded synthetic trial generator.

The scene is a row of tabletop objects seen through a head-mounted camera.
Each trial has an idle instruction phase (central-bias fixations) followed
by a task phase whose structure depends on intent:

* inspection: fixation bouts alternate between the two or three named
  objects (comparison behaviour);
* manipulation: long bouts locked on the target, interrupted by brief
  look-ahead glances to a point near it.

Intent-specific information lives in the temporal structure.  Fixation
points on objects are drawn from one bbox-normalized distribution for both
intents, and the manipulation offset is a rigid shift of the whole scene
(gaze and objects together), so bbox-normalized coordinates carry no class
signal.  Saccades follow minimum-jerk position profiles with
gamma-distributed peak speeds.  Task-phase path length is budgeted from a
per-trial rate so the inspection premium is explicit.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from .dataio import (
    GAZE_RATE_HZ,
    INSPECTION,
    INTENTS,
    MANIPULATION,
    OBJECT_LABELS,
    VIDEO_RATE_HZ,
    Dataset,
    GazeTrace,
    Track,
    Trial,
    canonical_json,
)

MIN_JERK_PEAK = 1.875  # peak speed of a minimum-jerk move, in units of amplitude / duration

DEFAULT_LAYOUT = {
    # bboxes in the unshifted scene: one row of objects on the table
    "banana": (145.0, 608.0, 295.0, 672.0),
    "bottle": (356.0, 555.0, 420.0, 725.0),
    "bowl": (476.0, 595.0, 636.0, 685.0),
    "cup": (682.0, 592.0, 766.0, 688.0),
    "doughnut": (837.0, 602.0, 947.0, 678.0),
    "orange": (1014.0, 594.0, 1106.0, 686.0),
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DropoutConfig:
    short_gap_rate: float = 0.5  # detector misses per second of track
    short_gap_s: tuple[float, float] = (0.05, 0.75)
    long_gap_rate: float = 0.04  # out-of-frame episodes per second
    long_gap_s: tuple[float, float] = (1.0, 3.0)


@dataclass(frozen=True)
class GeneratorConfig:
    n_subjects: int = 8
    trials_per_subject: int = 250
    frame_size: tuple[int, int] = (1280, 960)
    layout: Mapping[str, tuple[float, float, float, float]] = field(default_factory=lambda: dict(DEFAULT_LAYOUT))
    manipulation_offset_x: float = 100.0
    inspection_distance_premium: float = 0.08
    dropout: DropoutConfig = field(default_factory=DropoutConfig)
    rng_seed: int = 0
    physical_fraction: float = 0.534
    # population of subjects
    centroid_std: tuple[float, float] = (60.0, 40.0)
    centroid_spread: tuple[float, float] = (90.0, 70.0)
    speed_shape: float = 2.0
    speed_scale: float = 2500.0  # px/s; per-subject scales vary around it
    distance_bias_sigma: float = 0.25
    # trial structure
    head_jitter: tuple[float, float] = (35.0, 20.0)
    instruction_s: Mapping[str, tuple[float, float]] = field(
        default_factory=lambda: {INSPECTION: (3.0, 0.4), MANIPULATION: (2.0, 0.3)}
    )
    post_samples_min: int = 400
    post_extra_mean_s: Mapping[str, float] = field(
        default_factory=lambda: {INSPECTION: 1.2, MANIPULATION: 0.7}
    )
    fixation_median_s: float = 0.3
    fixation_sigma: float = 0.35
    path_rate: float = 650.0  # px/s of task-phase gaze path for a manipulation trial
    path_rate_sigma: float = 0.1
    gaze_noise_px: float = 0.5
    gaze_missing_rate: float = 0.002
    bbox_noise_px: float = 1.0
    glance_radius: tuple[float, float] = (140.0, 260.0)
    glance_axis: float = 0.3  # radians; glances go either way along this axis (0 = horizontal)
    glance_angle_sd: float = 0.15  # radians around the axis
    glance_duration_factor: float = 0.35  # glance fixation length relative to an on-object fixation
    # fixations per object visit: visit_min + Geometric(visit_p), shared by both intents
    visit_min: int = 1
    visit_p: float = 0.5

    def __post_init__(self):
        problems = []
        if self.n_subjects < 1:
            problems.append("n_subjects >= 1")
        if self.trials_per_subject < 2 or self.trials_per_subject % 2:
            problems.append("trials_per_subject must be a positive even number")
        if self.frame_size[0] <= 0 or self.frame_size[1] <= 0:
            problems.append("frame_size must be positive")
        if not self.layout or any(k not in OBJECT_LABELS for k in self.layout):
            problems.append(f"layout labels must be drawn from {OBJECT_LABELS}")
        elif len(self.layout) < 3:
            problems.append("layout needs at least three objects")
        for label, b in self.layout.items():
            if not (b[0] < b[2] and b[1] < b[3]):
                problems.append(f"layout bbox for {label} is degenerate")
        if not 0.0 <= self.physical_fraction <= 1.0:
            problems.append("physical_fraction in [0, 1]")
        if self.inspection_distance_premium <= -1.0:
            problems.append("inspection_distance_premium > -1")
        for name in ("speed_shape", "speed_scale", "fixation_median_s", "path_rate", "fixation_sigma"):
            if getattr(self, name) <= 0:
                problems.append(f"{name} > 0")
        if self.visit_min < 0 or not 0.0 < self.visit_p <= 1.0:
            problems.append("visit_min >= 0 and visit_p in (0, 1]")
        if self.glance_duration_factor <= 0:
            problems.append("glance_duration_factor > 0")
        if self.post_samples_min < 1:
            problems.append("post_samples_min >= 1")
        if not 0.0 <= self.gaze_missing_rate < 1.0:
            problems.append("gaze_missing_rate in [0, 1)")
        d = self.dropout
        if d.short_gap_rate < 0 or d.long_gap_rate < 0:
            problems.append("dropout rates >= 0")
        if not (0 < d.short_gap_s[0] <= d.short_gap_s[1] < 0.8):
            problems.append("short gaps must be shorter than 0.8 s")
        if not (0.8 <= d.long_gap_s[0] <= d.long_gap_s[1]):
            problems.append("long gaps must be at least 0.8 s")
        if problems:
            raise ConfigError("invalid generator config: " + "; ".join(problems))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layout"] = {k: list(v) for k, v in sorted(self.layout.items())}
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "GeneratorConfig":
        d = dict(d)
        if "dropout" in d and isinstance(d["dropout"], Mapping):
            dd = dict(d["dropout"])
            for key in ("short_gap_s", "long_gap_s"):
                if key in dd:
                    dd[key] = tuple(dd[key])
            d["dropout"] = DropoutConfig(**dd)
        for key in ("frame_size", "centroid_std", "centroid_spread", "head_jitter", "glance_radius"):
            if key in d:
                d[key] = tuple(d[key])
        if "layout" in d:
            d["layout"] = {k: tuple(v) for k, v in d["layout"].items()}
        if "instruction_s" in d:
            d["instruction_s"] = {k: tuple(v) for k, v in d["instruction_s"].items()}
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def config_hash(self) -> str:
        return hashlib.sha256(canonical_json(self.to_dict()).encode()).hexdigest()[:16]


def load_config(path) -> GeneratorConfig:
    with open(path, encoding="utf-8") as fh:
        return GeneratorConfig.from_dict(json.load(fh))


@dataclass(frozen=True)
class SubjectProfile:
    subject_id: str
    gaze_centroid: tuple[float, float]
    centroid_spread: tuple[float, float]
    speed_shape: float
    speed_scale: float
    distance_bias: float

    def __post_init__(self):
        if min(self.centroid_spread) <= 0 or self.speed_shape <= 0 or self.speed_scale <= 0:
            raise ConfigError("subject spreads and gamma parameters must be positive")
        if self.distance_bias <= 0:
            raise ConfigError("distance_bias must be positive")


def draw_profiles(config: GeneratorConfig) -> list[SubjectProfile]:
    rng = np.random.default_rng(np.random.SeedSequence([config.rng_seed, 0xC0FFEE]))
    w, h = config.frame_size
    out = []
    for s in range(config.n_subjects):
        cx = w / 2 + rng.normal(0.0, config.centroid_std[0])
        cy = h / 2 + rng.normal(0.0, config.centroid_std[1])
        spread = np.asarray(config.centroid_spread) * np.exp(rng.normal(0.0, 0.2, size=2))
        out.append(
            SubjectProfile(
                subject_id=f"S{s + 1:02d}",
                gaze_centroid=(float(cx), float(cy)),
                centroid_spread=(float(spread[0]), float(spread[1])),
                speed_shape=config.speed_shape,
                speed_scale=float(config.speed_scale * np.exp(rng.normal(0.0, 0.1))),
                distance_bias=float(np.exp(rng.normal(0.0, config.distance_bias_sigma))),
            )
        )
    return out


# ---------------------------------------------------------------------------
# scanpath simulation


@dataclass
class Scanpath:
    """Rendered gaze plus the saccade intervals that produced it."""

    t: np.ndarray
    xy: np.ndarray
    valid: np.ndarray
    saccades: list[tuple[float, float, float, float]]  # (t_start, t_end, amplitude, drawn peak speed)
    instruction_end_t: float
    scene_offset: np.ndarray
    path_rate: float  # planned task-phase path length per second


def _fixation_point(rng, bbox) -> np.ndarray:
    # same bbox-normalized distribution for every object and intent
    u, v = rng.beta(4.0, 4.0, size=2)
    return np.array([bbox[0] + u * (bbox[2] - bbox[0]), bbox[1] + v * (bbox[3] - bbox[1])])


def _slot_layout(config: GeneratorConfig, rng, target_label: str, target_slot: int | None):
    """Assign labels to slot centres for one trial; each label keeps its own size."""
    labels = sorted(config.layout)
    centres = sorted(((b[0] + b[2]) / 2, (b[1] + b[3]) / 2) for b in config.layout.values())
    perm = list(rng.permutation(labels))
    if target_slot is not None:
        perm.remove(target_label)
        perm.insert(target_slot % len(centres), target_label)
    boxes = {}
    for (cx, cy), label in zip(centres, perm):
        b = config.layout[label]
        hw, hh = (b[2] - b[0]) / 2, (b[3] - b[1]) / 2
        boxes[label] = np.array([cx - hw, cy - hh, cx + hw, cy + hh])
    return boxes


def _task_locations(config, rng, intent, boxes, target_label, budget, start):
    """Fixation points for the task phase until ``budget`` pixels of saccades are planned.

    Returns the points and a per-point flag marking off-object glances.
    """
    points = []
    glance = []
    pos = start
    spent = 0.0
    target = boxes[target_label]
    centre = np.array([(target[0] + target[2]) / 2, (target[1] + target[3]) / 2])
    others = [k for k in boxes if k != target_label]
    named = [target_label] + list(rng.choice(others, size=rng.integers(1, 3), replace=False))
    label = named[rng.integers(len(named))] if intent == INSPECTION else target_label

    def bouts():
        nonlocal label
        while True:
            # one visit: same fixation-count law for every object and intent
            for _ in range(config.visit_min + rng.geometric(config.visit_p)):
                yield _fixation_point(rng, boxes[label]), False
            if intent == INSPECTION:
                # compare against the target: every other-object visit returns to it
                label = named[1 + rng.integers(len(named) - 1)] if label == target_label else target_label
            else:
                angle = config.glance_axis + rng.normal(0.0, config.glance_angle_sd) + np.pi * rng.integers(2)
                radius = rng.uniform(*config.glance_radius)
                yield centre + radius * np.array([np.cos(angle), np.sin(angle)]), True

    for p, is_glance in bouts():
        spent += float(np.hypot(*(p - pos)))
        points.append(p)
        glance.append(is_glance)
        pos = p
        if spent >= budget:
            break
    return points, np.array(glance)


def _render(events, t, noise_px, rng):
    """Evaluate piecewise fixation / minimum-jerk saccade events at times ``t``."""
    starts = np.array([e[0] for e in events])
    idx = np.clip(np.searchsorted(starts, t, side="right") - 1, 0, len(events) - 1)
    xy = np.empty((len(t), 2))
    for k in np.unique(idx):
        sel = idx == k
        t0, t1, p0, p1 = events[k]
        if p1 is None:
            xy[sel] = p0
        else:
            tau = np.clip((t[sel] - t0) / (t1 - t0), 0.0, 1.0)
            s = tau**3 * (10 - 15 * tau + 6 * tau**2)
            xy[sel] = p0 + s[:, None] * (p1 - p0)
    return xy + rng.normal(0.0, noise_px, size=xy.shape)


def simulate_scanpath(
    config: GeneratorConfig,
    profile: SubjectProfile,
    intent: str,
    seed,
    *,
    target_label: str | None = None,
    target_slot: int | None = None,
):
    """Simulate one trial's gaze. Returns (Scanpath, per-trial object boxes in frame coordinates)."""
    if intent not in INTENTS:
        raise ConfigError(f"intent must be one of {INTENTS}, got {intent!r}")
    rng = np.random.default_rng(seed)
    if target_label is None:
        target_label = str(rng.choice(sorted(config.layout)))
    elif target_label not in config.layout:
        raise ConfigError(f"target {target_label!r} not in layout")
    w, h = config.frame_size
    dt = 1.0 / GAZE_RATE_HZ

    boxes = _slot_layout(config, rng, target_label, target_slot)
    offset = np.array(profile.gaze_centroid) - np.array([w / 2, h / 2])
    offset = offset + rng.normal(0.0, config.head_jitter)
    if intent == MANIPULATION:
        offset = offset + np.array([config.manipulation_offset_x, 0.0])
    boxes = {k: b + np.tile(offset, 2) for k, b in boxes.items()}
    centroid = np.array([w / 2, h / 2]) + offset

    mu, sd = config.instruction_s[intent]
    instr_end = float(np.clip(rng.normal(mu, sd), 0.8, mu + 4 * sd))
    n_pre = int(np.ceil(instr_end / dt - 1e-9))
    n_post = config.post_samples_min + int(rng.exponential(config.post_extra_mean_s[intent]) / dt)
    n = n_pre + n_post
    t = np.arange(n) * dt
    task_dur = n * dt - instr_end

    def draw_fix():
        return config.fixation_median_s * float(np.exp(rng.normal(0.0, config.fixation_sigma)))

    def draw_speed():
        return float(rng.gamma(profile.speed_shape, profile.speed_scale))

    events = []  # (t0, t1, p0, p1); p1 None for fixations
    saccades = []

    # instruction phase: central-bias idle fixations, cut at instruction end
    now = 0.0
    pos = centroid + rng.normal(0.0, profile.centroid_spread)
    while True:
        end = min(now + draw_fix(), instr_end)
        events.append((now, end, pos, None))
        now = end
        if now >= instr_end:
            break
        nxt = centroid + rng.normal(0.0, profile.centroid_spread)
        vpeak = draw_speed()
        dur = MIN_JERK_PEAK * float(np.hypot(*(nxt - pos))) / vpeak
        if now + dur > instr_end:
            events[-1] = (events[-1][0], instr_end, pos, None)
            now = instr_end
            break
        events.append((now, now + dur, pos, nxt))
        saccades.append((now, now + dur, float(np.hypot(*(nxt - pos))), vpeak))
        now += dur
        pos = nxt

    rate = config.path_rate * profile.distance_bias * float(np.exp(rng.normal(0.0, config.path_rate_sigma)))
    if intent == INSPECTION:
        rate *= 1.0 + config.inspection_distance_premium
    # expected path added by sample noise per second of fixation
    noise_rate = GAZE_RATE_HZ * config.gaze_noise_px * np.sqrt(np.pi)
    target_path = rate * task_dur
    points, glance = _task_locations(config, rng, intent, boxes, target_label, 1.5 * target_path + 500.0, pos)
    amps = np.hypot(*np.diff(np.vstack([pos, *points]), axis=0).T)
    speeds = np.array([draw_speed() for _ in points])
    sacc_durs = MIN_JERK_PEAK * amps / speeds
    # cut the plan where saccade path plus fixation-noise path crosses the
    # target; the cut is randomly rounded to the step before or after it with
    # probabilities that make the expected path exactly the target
    total = np.cumsum(amps) + noise_rate * np.maximum(task_dur - np.cumsum(sacc_durs), 0.0)
    k = min(int(np.searchsorted(total, target_path)), len(points) - 1)
    if k > 0:
        lo, hi = total[k - 1], total[k]
        if hi > lo and rng.random() >= (target_path - lo) / (hi - lo):
            k -= 1
    points, amps, speeds, sacc_durs = points[: k + 1], amps[: k + 1], speeds[: k + 1], sacc_durs[: k + 1]
    fix = np.array([draw_fix() for _ in points])
    fix[glance[: k + 1]] *= config.glance_duration_factor
    # rescale fixation durations so the plan exactly fills the task phase
    spare = task_dur - sacc_durs.sum()
    scale = spare / fix.sum() if spare > 0 else 0.0
    fix = np.maximum(fix * scale, 2 * dt)
    for p, amp, sd_, vp, fd in zip(points, amps, sacc_durs, speeds, fix):
        events.append((now, now + sd_, pos, p))
        saccades.append((now, now + sd_, float(amp), float(vp)))
        now += sd_
        events.append((now, now + fd, p, None))
        now += fd
        pos = p

    xy = _render(events, t, config.gaze_noise_px, rng)
    valid = rng.random(n) >= config.gaze_missing_rate
    xy[~valid] = 0.0
    path = Scanpath(
        t=t, xy=xy, valid=valid, saccades=saccades, instruction_end_t=instr_end, scene_offset=offset,
        path_rate=rate,
    )
    return path, boxes


def _detections(config: GeneratorConfig, rng, bbox, t_end: float, phase: float):
    """30 Hz detections of a static object with detector misses and out-of-frame gaps."""
    w, h = config.frame_size
    times = np.arange(phase, t_end, 1.0 / VIDEO_RATE_HZ)
    keep = np.ones(len(times), dtype=bool)
    d = config.dropout
    for rate, (lo, hi) in ((d.short_gap_rate, d.short_gap_s), (d.long_gap_rate, d.long_gap_s)):
        n_gaps = rng.poisson(rate * t_end)
        for _ in range(n_gaps):
            start = rng.uniform(0.0, t_end)
            keep &= ~((times >= start) & (times < start + rng.uniform(lo, hi)))
    boxes = bbox + rng.normal(0.0, config.bbox_noise_px, size=(len(times), 4))
    boxes[:, [0, 2]] = np.clip(boxes[:, [0, 2]], 0.0, w)
    boxes[:, [1, 3]] = np.clip(boxes[:, [1, 3]], 0.0, h)
    cx = (bbox[0] + bbox[2]) / 2
    cy = (bbox[1] + bbox[3]) / 2
    in_frame = 0 <= cx < w and 0 <= cy < h
    ok = keep & (boxes[:, 2] - boxes[:, 0] > 1.0) & (boxes[:, 3] - boxes[:, 1] > 1.0) & in_frame
    return times[ok], boxes[ok]


def simulate_trial(
    config: GeneratorConfig,
    profile: SubjectProfile,
    intent: str,
    seed,
    *,
    trial_id: str = "T0",
    target_label: str | None = None,
    target_slot: int | None = None,
    manipulation_kind: str | None = None,
) -> tuple[Trial, Scanpath]:
    rng = np.random.default_rng(np.random.SeedSequence(entropy=_entropy(seed), spawn_key=(1,)))
    if target_label is None:
        target_label = str(rng.choice(sorted(config.layout)))
    path, boxes = simulate_scanpath(
        config, profile, intent, seed, target_label=target_label, target_slot=target_slot
    )
    if intent == MANIPULATION and manipulation_kind is None:
        manipulation_kind = "physical" if rng.random() < config.physical_fraction else "imaginary"
    if intent == INSPECTION:
        manipulation_kind = None
    t_end = float(path.t[-1])
    phase = rng.uniform(0.0, 1.0 / VIDEO_RATE_HZ)
    tracks = {}
    for label in sorted(boxes):
        tt, bb = _detections(config, rng, boxes[label], t_end, phase)
        if label == target_label and len(tt) == 0:
            # keep the target observable at least once
            tt, bb = np.array([phase]), boxes[label][None, :]
        if len(tt):
            tracks[label] = Track(label, tt, bb)
    trial = Trial(
        trial_id=trial_id,
        subject_id=profile.subject_id,
        intent=intent,
        manipulation_kind=manipulation_kind,
        target_label=target_label,
        instruction_end_t=path.instruction_end_t,
        gaze=GazeTrace(path.t, path.xy[:, 0], path.xy[:, 1], path.valid),
        tracks=tracks,
        frame_size=config.frame_size,
    )
    return trial, path


def _entropy(seed) -> int:
    if isinstance(seed, np.random.SeedSequence):
        return int(seed.generate_state(1)[0])
    if isinstance(seed, (list, tuple)):
        return int(np.random.SeedSequence(list(seed)).generate_state(1)[0])
    return int(seed)


def generate_trial(config: GeneratorConfig, profile: SubjectProfile, intent: str, seed, **kwargs) -> Trial:
    return simulate_trial(config, profile, intent, seed, **kwargs)[0]


def trial_seed(config: GeneratorConfig, subject_index: int, trial_index: int) -> list[int]:
    return [config.rng_seed, subject_index, trial_index]


def trial_plan(config: GeneratorConfig, subject_index: int, rng=None):
    """Per-subject balanced schedule of (intent, target_slot, target_label, manipulation_kind)."""
    rng = rng or np.random.default_rng(np.random.SeedSequence([config.rng_seed, 0xBA1A, subject_index]))
    half = config.trials_per_subject // 2
    labels = sorted(config.layout)
    n_slots = len(labels)
    n_phys = int(round(config.physical_fraction * half))
    kinds = ["physical"] * n_phys + ["imaginary"] * (half - n_phys)
    kinds = list(rng.permutation(kinds))
    plan = []
    for intent in INTENTS:
        slots = rng.permutation(np.resize(np.arange(n_slots), half))
        targets = rng.permutation(np.resize(np.arange(len(labels)), half))
        for j in range(half):
            kind = kinds[j] if intent == MANIPULATION else None
            plan.append((intent, int(slots[j]), labels[int(targets[j])], kind))
    order = rng.permutation(len(plan))
    return [plan[i] for i in order]


def generate_dataset(config: GeneratorConfig, *, with_scanpaths: bool = False):
    profiles = draw_profiles(config)
    trials = []
    scanpaths = []
    for s, profile in enumerate(profiles):
        for i, (intent, slot, label, kind) in enumerate(trial_plan(config, s)):
            trial, path = simulate_trial(
                config,
                profile,
                intent,
                trial_seed(config, s, i),
                trial_id=f"{profile.subject_id}-{i:04d}",
                target_label=label,
                target_slot=slot,
                manipulation_kind=kind,
            )
            trials.append(trial)
            if with_scanpaths:
                scanpaths.append(path)
    provenance = {"kind": "synthetic", "seed": config.rng_seed, "config_hash": config.config_hash()}
    ds = Dataset(tuple(trials), tuple(p.subject_id for p in profiles), provenance)
    if with_scanpaths:
        return ds, scanpaths
    return ds
