"""Benchmark losses, masking rules, baselines, folds, and data filters.

Velocity errors are Nyquist-aware: values differing by an integer multiple
of twice the Nyquist velocity are alias-equivalent and score zero. Blood
velocity and turbulence are supervised only where the Doppler signal is
reliable (inside the operator box, sufficient power, dark B-mode), while
power is supervised everywhere a target exists. Segmentation uses a
foreground-only Dice with smoothing, averaged over annotated frames.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .container import ExamManifest, Recording, is_doppler
from .errors import ValidationError
from .timing import pair_interleaved

DICE_SMOOTHING = 1e-6
FOREGROUND_CLASSES = (1, 2)


@dataclass(frozen=True)
class AliasParams:
    """Case-specific Nyquist velocity (meters/second)."""

    nyquist: float

    def __post_init__(self):
        if not self.nyquist > 0:
            raise ValidationError("AliasParams.nyquist must be positive")


@dataclass(frozen=True)
class MaskParams:
    """Thresholds and weights of the valid-velocity mask."""

    tau_power: float = 0.3
    tau_bmode: float = 0.4
    inside_floor: float = 0.01
    outside_weight: float = 0.01

    def __post_init__(self):
        vals = (self.tau_power, self.tau_bmode, self.inside_floor, self.outside_weight)
        if any(not (0.0 <= v <= 1.0) for v in vals):
            raise ValidationError("MaskParams fields must lie in [0, 1]")


@dataclass(frozen=True)
class ColorBox:
    """Operator-placed color box as a boolean region (static or per frame)."""

    region: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "region", np.asarray(self.region, bool))

    @classmethod
    def from_ranges(cls, shape, beam_range, sample_range) -> "ColorBox":
        """Static rectangular box in (beam, sample) index space."""
        region = np.zeros(shape, bool)
        region[beam_range[0]:beam_range[1], sample_range[0]:sample_range[1]] = True
        return cls(region)

    def per_frame(self, frame_shape, n_frames: int) -> np.ndarray:
        """Broadcast to (n_frames,) + frame_shape, validating the footprint."""
        if self.region.shape == frame_shape:
            return np.broadcast_to(self.region, (n_frames,) + frame_shape)
        if self.region.shape == (n_frames,) + frame_shape:
            return self.region
        raise ValidationError(
            f"ColorBox.region shape {self.region.shape} does not match frames "
            f"{(n_frames,) + frame_shape}")


def _check_same_shape(*arrays):
    shapes = {np.asarray(a).shape for a in arrays}
    if len(shapes) != 1:
        raise ValidationError(f"shape mismatch: {sorted(shapes)}")


def alias_distance(a, b, nyquist: float):
    """Nyquist-normalized alias-equivalent distance in [0, 1].

    min over integer k of |a - b + 2*k*nyquist|, divided by nyquist.
    """
    if not nyquist > 0:
        raise ValidationError("nyquist must be positive")
    d = np.mod(np.asarray(a, float) - np.asarray(b, float) + nyquist,
               2.0 * nyquist) - nyquist
    return np.abs(d) / nyquist


def wrap_velocity(v, nyquist: float) -> np.ndarray:
    """Wrap velocities into [-nyquist, nyquist), the stored aliased range."""
    if not nyquist > 0:
        raise ValidationError("nyquist must be positive")
    return np.mod(np.asarray(v, float) + nyquist, 2.0 * nyquist) - nyquist


def task1_loss(pred, target, nyquist: float) -> float:
    """Mean alias distance over all spatiotemporal pixels."""
    pred = np.asarray(pred, float)
    target = np.asarray(target, float)
    _check_same_shape(pred, target)
    return float(np.mean(alias_distance(pred, target, nyquist)))


def turbulence_proxy(v) -> np.ndarray:
    """Per-pixel population std over a 3x3 neighborhood (edge replication).

    Works on a single (H, W) frame or any (..., H, W) stack.
    """
    v = np.asarray(v, float)
    padded = np.pad(v, [(0, 0)] * (v.ndim - 2) + [(1, 1), (1, 1)], mode="edge")
    h, w = v.shape[-2:]
    windows = np.stack([padded[..., di:di + h, dj:dj + w]
                        for di in range(3) for dj in range(3)])
    # shift by the center value: std is shift-invariant, and constant
    # neighborhoods come out exactly zero
    centered = windows - v[None]
    mean = centered.mean(axis=0)
    return np.sqrt(np.mean((centered - mean) ** 2, axis=0))


def valid_velocity_mask(box: ColorBox, power, bmode, params: MaskParams = MaskParams(),
                        *, strict: bool = False):
    """Valid-velocity mask and its training-weight variant.

    mask = box AND power >= tau_power AND bmode <= tau_bmode (strict=True
    switches to >/< comparisons). The weight map floors suppressed in-box
    pixels at inside_floor and assigns outside_weight beyond the box.
    Returns (mask, weights) as float arrays.
    """
    power = np.asarray(power, float)
    bmode = np.asarray(bmode, float)
    _check_same_shape(power, bmode)
    n_frames = power.shape[0] if power.ndim == 3 else 1
    frame_shape = power.shape[-2:]
    region = box.per_frame(frame_shape, n_frames)
    region = region.reshape(power.shape)
    if strict:
        ok = (power > params.tau_power) & (bmode < params.tau_bmode)
    else:
        ok = (power >= params.tau_power) & (bmode <= params.tau_bmode)
    mask = (region & ok).astype(float)
    weights = np.where(region, np.maximum(mask, params.inside_floor),
                       params.outside_weight)
    return mask, weights


class Task2Terms(NamedTuple):
    velocity: float | None
    power: float
    variation: float | None


def _masked_mean(err: np.ndarray, mask: np.ndarray) -> float | None:
    m = mask > 0
    if not m.any():
        return None
    return float(np.mean(err[m]))


def task2_loss(pred_v, pred_p, pred_s, target_v, target_p, target_s,
               mask) -> Task2Terms:
    """L1 terms of the blood-velocity task, reported separately.

    Power is an unmasked mean; velocity and variation average only over
    mask == 1 pixels and are absent (None) when the mask is empty.
    """
    arrays = [np.asarray(a, float) for a in
              (pred_v, pred_p, pred_s, target_v, target_p, target_s, mask)]
    _check_same_shape(*arrays)
    pv, pp, ps, tv, tp, ts, m = arrays
    return Task2Terms(
        velocity=_masked_mean(np.abs(pv - tv), m),
        power=float(np.mean(np.abs(pp - tp))),
        variation=_masked_mean(np.abs(ps - ts), m),
    )


def _check_probs(pred_probs: np.ndarray):
    sums = pred_probs.sum(axis=0)
    if np.max(np.abs(sums - 1.0)) > 1e-5:
        raise ValidationError("pred_probs channels must sum to 1 per pixel")


def masked_dice_loss(pred_probs, ref, annotated) -> float:
    """Foreground-only soft Dice loss, averaged over annotated frames.

    pred_probs has channel-first shape (3, T, H, W) with per-pixel channel
    sums of 1; ref holds labels in {0, 1, 2}; annotated flags frames with
    reference masks (other frames are padding and do not contribute).
    """
    pred_probs = np.asarray(pred_probs, float)
    ref = np.asarray(ref)
    annotated = np.asarray(annotated, bool)
    if pred_probs.ndim != 4 or pred_probs.shape[0] != 3:
        raise ValidationError("pred_probs must have shape (3, T, H, W)")
    if pred_probs.shape[1:] != ref.shape:
        raise ValidationError("pred_probs and ref shapes disagree")
    if annotated.shape != (ref.shape[0],):
        raise ValidationError("annotated must have one flag per frame")
    if not annotated.any():
        raise ValidationError("no annotated frames")
    _check_probs(pred_probs)

    losses = []
    for t in np.flatnonzero(annotated):
        dice = []
        for c in FOREGROUND_CLASSES:
            p = pred_probs[c, t]
            g = (ref[t] == c).astype(float)
            inter = float(np.sum(p * g))
            dice.append((2.0 * inter + DICE_SMOOTHING)
                        / (float(np.sum(p)) + float(np.sum(g)) + DICE_SMOOTHING))
        losses.append(1.0 - float(np.mean(dice)))
    return float(np.mean(losses))


def dice_score(pred_labels, ref_labels, annotated) -> float:
    """Hard foreground Dice in percent, averaged over annotated frames and
    foreground classes. Classes absent from both prediction and reference
    in a frame are skipped (their overlap is undefined)."""
    pred = np.asarray(pred_labels)
    ref = np.asarray(ref_labels)
    annotated = np.asarray(annotated, bool)
    _check_same_shape(pred, ref)
    if not annotated.any():
        raise ValidationError("no annotated frames")
    scores = []
    for t in np.flatnonzero(annotated):
        for c in FOREGROUND_CLASSES:
            a = pred[t] == c
            b = ref[t] == c
            denom = int(a.sum()) + int(b.sum())
            if denom == 0:
                continue
            scores.append(2.0 * int((a & b).sum()) / denom)
    if not scores:
        raise ValidationError("no foreground present in any annotated frame")
    return 100.0 * float(np.mean(scores))


def radial_weights(n_rows: int) -> np.ndarray:
    """Linear depth weighting from 0.001 at the probe to 1.999 at maximum
    depth; mean 1 by symmetry. Counteracts the depth-dependent pixel area
    of beamspace rows."""
    if n_rows < 2:
        raise ValidationError("radial_weights needs n_rows >= 2")
    return np.linspace(0.001, 1.999, n_rows)


def temporal_mean_baseline(target) -> np.ndarray:
    """Constant-in-time prediction: every frame is the per-pixel mean of the
    input frames."""
    target = np.asarray(target, float)
    if target.shape[0] < 1:
        raise ValidationError("temporal_mean_baseline needs at least 1 frame")
    mean = target.mean(axis=0)
    return np.broadcast_to(mean, target.shape).copy()


def velocity_scale(dr: float, fps: float) -> float:
    """Meters/second per (sample/frame): radial sample spacing times frame rate."""
    if not dr > 0:
        raise ValidationError("dr must be positive")
    if not fps > 0:
        raise ValidationError("fps must be positive")
    return dr * fps


class FoldSummary(NamedTuple):
    mean: float
    std: float


def aggregate_folds(per_fold, n_folds: int = 5) -> FoldSummary:
    """Mean and sample standard deviation across validation folds."""
    vals = np.asarray(per_fold, float)
    if vals.shape != (n_folds,):
        raise ValidationError(
            f"expected {n_folds} fold values, got shape {vals.shape}")
    return FoldSummary(float(np.mean(vals)), float(np.std(vals, ddof=1)))


def make_patient_folds(manifests, n_folds: int = 5, seed: int = 0) -> dict:
    """Deterministic patient-grouped fold assignment.

    All exams of a patient share a fold; per-fold patient counts differ by
    at most one; the result depends only on the patient keys and the seed,
    not on exam order. Returns {patient_key: fold}.
    """
    keys = set()
    for m in manifests:
        if not m.patient_key:
            raise ValidationError(f"exam {m.exam_id} has no patient_key")
        keys.add(m.patient_key)
    ordered = sorted(keys)
    random.Random(seed).shuffle(ordered)
    return {key: i % n_folds for i, key in enumerate(ordered)}


@dataclass(frozen=True)
class FilterResult:
    """Outcome of the per-recording data filter, naming failed predicates."""

    accept: bool
    reasons: tuple

    def __bool__(self):
        return self.accept


TASK_STREAMS = {1: ("bmode2d", "tdi2d"), 2: ("bmode2d", "color2d"),
                3: ("bmode2d", None)}

MIN_FRAMES = 32
TISSUE_FPS_RANGE = (26.0, 33.0)
FLOW_FPS_RANGE = (9.0, 13.0)
FLOW_RATIO_RANGE = (0.45, 1.1)
FLOW_NYQUIST_RANGE = (0.60, 0.61)
PAIRING_SLACK_FACTOR = 1.5


def filter_recording(rec: Recording, task: int) -> FilterResult:
    """Accept/reject a recording for a benchmark task, naming each failed
    predicate (frame rate ranges, frame-count ratio, Nyquist range,
    timestamp slack, minimum length)."""
    if task not in TASK_STREAMS:
        raise ValidationError(f"unknown task {task}")
    bmode_mod, target_mod = TASK_STREAMS[task]
    bmode = rec.stream_of(bmode_mod)
    target = rec.stream_of(target_mod) if target_mod else None

    reasons = []
    if bmode.header.n_frames < MIN_FRAMES:
        reasons.append(f"below {MIN_FRAMES} frames")
    if task == 1:
        lo, hi = TISSUE_FPS_RANGE
        fps = bmode.header.fps()
        if not lo <= fps <= hi:
            reasons.append(f"FPS out of [{lo:g},{hi:g}]")
        pairing = pair_interleaved(bmode.header.timestamps,
                                   target.header.timestamps,
                                   PAIRING_SLACK_FACTOR)
        if not pairing.matched.all():
            reasons.append(
                f"timestamp slack above {PAIRING_SLACK_FACTOR}x median spacing")
    elif task == 2:
        lo, hi = FLOW_FPS_RANGE
        fps = bmode.header.fps()
        if not lo <= fps <= hi:
            reasons.append(f"FPS out of [{lo:g},{hi:g}]")
        ratio = target.header.n_frames / bmode.header.n_frames
        rlo, rhi = FLOW_RATIO_RANGE
        if not rlo <= ratio <= rhi:
            reasons.append(f"Doppler:B-mode frame ratio out of [{rlo:g},{rhi:g}]")
        nlo, nhi = FLOW_NYQUIST_RANGE
        nyq = target.header.nyquist_velocity
        if nyq is None or not nlo <= nyq <= nhi:
            reasons.append(f"Nyquist out of [{nlo:g},{nhi:g}] m/s")
    elif task == 3:
        if not rec.annotations.contours:
            reasons.append("no segmentation contours")
    if target is not None and is_doppler(target.modality) and task == 1:
        if target.header.n_frames < MIN_FRAMES:
            reasons.append(f"target below {MIN_FRAMES} frames")
    return FilterResult(not reasons, tuple(reasons))


def sample_clips(n_frames: int, clip_len: int = 32, stride: int = 16) -> list:
    """Sliding clip starts: [start, start + clip_len) while it fits."""
    if clip_len < 1 or stride < 1:
        raise ValidationError("clip_len and stride must be >= 1")
    return [(s, s + clip_len) for s in range(0, max(n_frames - clip_len + 1, 0), stride)]


@dataclass(frozen=True)
class CaseResult:
    """One scored (case, term) pair."""

    case_id: str
    task: int
    term: str
    value: float | None
    fold: int | None = None


@dataclass
class MetricReport:
    """Per-case values with per-fold and across-fold aggregation."""

    cases: list = field(default_factory=list)
    n_folds: int = 5

    def add(self, case: CaseResult):
        self.cases.append(case)

    def terms(self) -> list:
        seen = []
        for c in self.cases:
            if c.term not in seen:
                seen.append(c.term)
        return seen

    def fold_means(self, term: str) -> dict:
        by_fold: dict = {}
        for c in self.cases:
            if c.term == term and c.fold is not None and c.value is not None:
                by_fold.setdefault(c.fold, []).append(c.value)
        return {f: float(np.mean(v)) for f, v in sorted(by_fold.items())}

    def summary(self, term: str) -> FoldSummary:
        means = self.fold_means(term)
        if len(means) != self.n_folds:
            raise ValidationError(
                f"term {term}: expected {self.n_folds} folds, got {len(means)}")
        return aggregate_folds([means[f] for f in sorted(means)], self.n_folds)
