"""ECG beat detection, cardiac phase, stream pairing, and beat stitching.

Every recording carries a co-acquired ECG; detected R peaks anchor the
cardiac cycle and give each frame a phase in [0, 1). Phase is the shared
clock used to pair interleaved streams, to reassemble gated multi-beat
acquisitions into one wide sector, and to replicate single-cycle
annotations onto every beat of a recording.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import RefusalError, ValidationError

REFRACTORY_S = 0.25       # minimum gap between beat anchors
DEFAULT_MAX_CV = 0.10     # rhythm-regularity gate for stitching/propagation


@dataclass(frozen=True)
class EcgTrace:
    """Single-lead ECG: samples in millivolts at a fixed rate, starting at t0."""

    samples: np.ndarray
    rate: float = 600.0
    t0: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "samples", np.asarray(self.samples, float))
        bad = []
        if self.rate <= 0:
            bad.append("EcgTrace.rate must be positive")
        if self.samples.ndim != 1 or self.samples.size < 1:
            bad.append("EcgTrace.samples must be a nonempty 1D array")
        if bad:
            raise ValidationError(bad)

    @property
    def times(self) -> np.ndarray:
        return self.t0 + np.arange(self.samples.size) / self.rate

    @property
    def duration(self) -> float:
        return self.samples.size / self.rate

    def __eq__(self, other):
        return (isinstance(other, EcgTrace)
                and np.array_equal(self.samples, other.samples)
                and self.rate == other.rate and self.t0 == other.t0)


@dataclass(frozen=True)
class RPeakList:
    """Ascending beat anchor times (seconds).

    warning is set when detection ran but found nothing usable (flat trace).
    """

    times: np.ndarray
    warning: bool = False

    def __post_init__(self):
        object.__setattr__(self, "times", np.asarray(self.times, float))
        bad = []
        if self.times.ndim != 1:
            bad.append("RPeakList.times must be 1D")
        gaps = np.diff(self.times)
        if gaps.size and not np.all(gaps > 0):
            bad.append("RPeakList.times must be strictly increasing")
        elif gaps.size and np.min(gaps) < REFRACTORY_S:
            bad.append(f"RPeakList.times gaps must be >= {REFRACTORY_S} s")
        if bad:
            raise ValidationError(bad)

    def __len__(self):
        return self.times.size

    @property
    def rr_intervals(self) -> np.ndarray:
        return np.diff(self.times)


def detect_r_peaks(ecg: EcgTrace, refractory_s: float = REFRACTORY_S) -> RPeakList:
    """Detect R peaks: differentiate, square, 150 ms window integration,
    adaptive threshold at half the running peak median, refractory gate.

    Amplitude-scale invariant. A flat trace yields an empty list with the
    warning flag set instead of an error.
    """
    x = np.asarray(ecg.samples, float)
    rate = float(ecg.rate)
    if x.size / rate < 1.0:
        raise ValidationError("ECG trace shorter than 1 s")

    # five-point slope estimator, then energy and moving-window integration
    d = np.zeros_like(x)
    d[2:-2] = (2.0 * (x[3:-1] - x[1:-3]) + (x[4:] - x[:-4])) / 8.0
    energy = d * d
    w = max(1, int(round(0.150 * rate)))
    y = np.convolve(energy, np.ones(w) / w, mode="same")
    if not np.any(y > 0):
        return RPeakList(np.empty(0), warning=True)

    cand = np.flatnonzero((y[1:-1] >= y[:-2]) & (y[1:-1] > y[2:])) + 1
    if cand.size == 0:
        return RPeakList(np.empty(0), warning=True)
    heights = y[cand]

    # seed the running median from the prominent maxima
    boot = heights[heights >= 0.4 * heights.max()]
    recent: deque = deque(boot[:8], maxlen=8)
    refr = int(round(refractory_s * rate))

    accepted: list[tuple[int, float]] = []
    for i, h in zip(cand, heights):
        if h < 0.5 * float(np.median(recent)):
            continue
        if accepted and i - accepted[-1][0] < refr:
            if h > accepted[-1][1]:
                accepted[-1] = (int(i), float(h))
        else:
            accepted.append((int(i), float(h)))
            recent.append(float(h))
    if not accepted:
        return RPeakList(np.empty(0), warning=True)

    # snap each detection to the raw-waveform extremum nearby; the window
    # must cover the integration plateau (half the window plus spike width)
    base = float(np.median(x))
    half = w // 2 + int(round(0.030 * rate))
    snapped: list[tuple[int, float]] = []
    for i, _ in accepted:
        lo, hi = max(0, i - half), min(x.size, i + half + 1)
        j = lo + int(np.argmax(np.abs(x[lo:hi] - base)))
        amp = abs(x[j] - base)
        if snapped and j - snapped[-1][0] < refr:
            if amp > snapped[-1][1]:
                snapped[-1] = (j, amp)
        else:
            snapped.append((j, amp))
    times = ecg.t0 + np.array([j for j, _ in snapped], float) / rate
    return RPeakList(times)


def rr_regularity(peaks: RPeakList) -> float:
    """Coefficient of variation (sample std / mean) of the RR intervals."""
    if len(peaks) < 3:
        raise ValidationError("rr_regularity needs at least 3 peaks")
    rr = peaks.rr_intervals
    return float(np.std(rr, ddof=1) / np.mean(rr))


def phase_of(t, peaks: RPeakList):
    """Cardiac phase in [0, 1) at time(s) t; NaN outside [first, last) peak."""
    if len(peaks) < 2:
        raise ValidationError("phase_of needs at least 2 peaks")
    p = peaks.times
    t_arr = np.asarray(t, float)
    k = np.searchsorted(p, t_arr, side="right") - 1
    valid = (k >= 0) & (k <= p.size - 2)
    kk = np.clip(k, 0, p.size - 2)
    ph = (t_arr - p[kk]) / (p[kk + 1] - p[kk])
    out = np.where(valid, ph, np.nan)
    return float(out) if np.ndim(t) == 0 else out


@dataclass(frozen=True)
class StreamPairing:
    """Frame matching of stream B onto stream A.

    a_index[j] is the A frame matched to B frame j (-1 when unmatched),
    dt[j] the signed time offset, slack_bound the |dt| limit that was used.
    """

    a_index: np.ndarray
    dt: np.ndarray
    slack_bound: float

    @property
    def matched(self) -> np.ndarray:
        return self.a_index >= 0

    @property
    def n_matched(self) -> int:
        return int(np.count_nonzero(self.matched))

    @property
    def max_abs_dt(self) -> float:
        m = self.matched
        return float(np.max(np.abs(self.dt[m]))) if m.any() else 0.0


def pair_interleaved(ts_a, ts_b, slack_factor: float = 1.5) -> StreamPairing:
    """Match each B frame to its nearest A frame within the slack bound.

    The bound is slack_factor times the median frame spacing of A (0 when A
    has a single frame, so only exact matches survive). Ties between two
    equally near A frames resolve to the earlier one.
    """
    ta = np.asarray(ts_a, float)
    tb = np.asarray(ts_b, float)
    for name, ts in (("ts_a", ta), ("ts_b", tb)):
        if ts.size == 0:
            raise ValidationError(f"{name} must be nonempty")
        if ts.size > 1 and not np.all(np.diff(ts) > 0):
            raise ValidationError(f"{name} must be strictly increasing")
    slack = slack_factor * float(np.median(np.diff(ta))) if ta.size > 1 else 0.0

    pos = np.searchsorted(ta, tb)
    left = np.clip(pos - 1, 0, ta.size - 1)
    right = np.clip(pos, 0, ta.size - 1)
    take_left = np.abs(tb - ta[left]) <= np.abs(ta[right] - tb)
    idx = np.where(take_left, left, right)
    dt = tb - ta[idx]
    matched = np.abs(dt) <= slack
    return StreamPairing(np.where(matched, idx, -1), dt, slack)


@dataclass(frozen=True)
class SubAcquisition:
    """One beat-gated slice of a wider acquisition.

    frames has shape (T, ..., n_beams_sub, n_samples); beam_start is the
    first azimuth beam of this slice within the full sector.
    """

    frames: np.ndarray
    times: np.ndarray
    beam_start: int

    def __post_init__(self):
        object.__setattr__(self, "frames", np.asarray(self.frames, float))
        object.__setattr__(self, "times", np.asarray(self.times, float))
        bad = []
        if self.frames.ndim < 3:
            bad.append("SubAcquisition.frames must have shape (T, ..., beams, samples)")
        elif self.frames.shape[0] != self.times.size:
            bad.append("SubAcquisition.times length must match frame count")
        if self.times.size > 1 and not np.all(np.diff(self.times) > 0):
            bad.append("SubAcquisition.times must be strictly increasing")
        if bad:
            raise ValidationError(bad)

    @property
    def n_beams(self) -> int:
        return self.frames.shape[-2]


@dataclass(frozen=True)
class StitchedSeries:
    """Phase-resampled wide-sector series assembled from gated slices."""

    frames: np.ndarray   # (n_phase, ..., total_beams, n_samples)
    phases: np.ndarray   # common phase axis in [0, 1)
    beam_counts: tuple = field(default=())


def _beat_phases(times: np.ndarray, peaks: RPeakList) -> np.ndarray:
    ph = phase_of(times, peaks)
    if np.any(np.isnan(ph)):
        raise ValidationError("sub-acquisition frames fall outside detected beats")
    k = np.searchsorted(peaks.times, times, side="right") - 1
    if np.unique(k).size != 1:
        raise ValidationError("sub-acquisition spans more than one beat")
    return ph


def _resample_phase(frames: np.ndarray, phases: np.ndarray, target: np.ndarray) -> np.ndarray:
    if frames.shape[0] == 1:
        return np.repeat(frames, target.size, axis=0)
    idx = np.clip(np.searchsorted(phases, target, side="right") - 1, 0, phases.size - 2)
    w = (target - phases[idx]) / (phases[idx + 1] - phases[idx])
    w = np.clip(w, 0.0, 1.0)  # clamp instead of extrapolating at the ends
    w = w.reshape((-1,) + (1,) * (frames.ndim - 1))
    lo = frames[idx]
    return lo + w * (frames[idx + 1] - lo)


def stitch_multibeat(subacqs, peaks: RPeakList,
                     max_cv: float = DEFAULT_MAX_CV) -> StitchedSeries:
    """Reassemble beat-gated azimuth slices into one wide-sector cycle.

    Each slice is phase-normalized to its own beat, linearly resampled onto
    the phase axis of the slice with the most frames, and concatenated along
    the azimuth (beams) axis. Refuses under irregular rhythm (CV > max_cv)
    and rejects overlapping or gapped azimuth ranges.
    """
    subacqs = list(subacqs)
    if not subacqs:
        raise ValidationError("no sub-acquisitions given")
    cv = rr_regularity(peaks)
    if cv > max_cv:
        raise RefusalError(
            f"rhythm CV {cv:.3f} exceeds {max_cv:.3f}; stitching refused")

    if len(subacqs) == 1:
        sub = subacqs[0]
        return StitchedSeries(sub.frames.copy(), _beat_phases(sub.times, peaks),
                              (sub.n_beams,))

    order = sorted(subacqs, key=lambda s: s.beam_start)
    expected = order[0].beam_start
    for sub in order:
        if sub.beam_start != expected:
            raise ValidationError("overlapping or gapped azimuth ranges")
        expected = sub.beam_start + sub.n_beams
    ref_shape = order[0].frames.shape
    for sub in order:
        if sub.frames.shape[1:-2] != ref_shape[1:-2] or sub.frames.shape[-1] != ref_shape[-1]:
            raise ValidationError("sub-acquisition shapes differ outside the azimuth axis")

    phases = [_beat_phases(sub.times, peaks) for sub in order]
    ref = int(np.argmax([sub.frames.shape[0] for sub in order]))
    target = phases[ref]
    parts = [_resample_phase(sub.frames, ph, target)
             for sub, ph in zip(order, phases)]
    return StitchedSeries(np.concatenate(parts, axis=-2), target,
                          tuple(s.n_beams for s in order))


@dataclass(frozen=True)
class PropagatedAnnotation:
    """Single-cycle annotation replicated onto every beat.

    source_index[i] names the source frame rendered at times[i];
    source_phase records its cardiac phase, beat_index the target beat.
    """

    times: np.ndarray
    source_index: np.ndarray
    source_phase: np.ndarray
    beat_index: np.ndarray
    frames: np.ndarray | None = None


def propagate_cycle_annotation(ann_times, peaks: RPeakList, span,
                               max_cv: float = DEFAULT_MAX_CV,
                               frames=None) -> PropagatedAnnotation:
    """Replicate a one-beat annotation onto every detected beat in span.

    ann_times must lie within a single RR interval; output frames are placed
    at the same phases inside each beat and clipped to span = (t_start, t_end).
    Refuses under irregular rhythm.
    """
    cv = rr_regularity(peaks)
    if cv > max_cv:
        raise RefusalError(
            f"rhythm CV {cv:.3f} exceeds {max_cv:.3f}; propagation refused")
    ann_times = np.asarray(ann_times, float)
    if ann_times.size == 0:
        raise ValidationError("annotation has no frames")
    src_phase = _beat_phases(ann_times, peaks)

    t0, t1 = float(span[0]), float(span[1])
    p = peaks.times
    out_t, out_src, out_ph, out_beat = [], [], [], []
    for k in range(p.size - 1):
        rr = p[k + 1] - p[k]
        tt = p[k] + src_phase * rr
        keep = (tt >= t0) & (tt <= t1)
        out_t.append(tt[keep])
        out_src.append(np.flatnonzero(keep))
        out_ph.append(src_phase[keep])
        out_beat.append(np.full(int(keep.sum()), k))
    times = np.concatenate(out_t) if out_t else np.empty(0)
    src = np.concatenate(out_src).astype(int) if out_src else np.empty(0, int)
    gathered = None
    if frames is not None:
        gathered = np.asarray(frames)[src]
    return PropagatedAnnotation(times, src,
                                np.concatenate(out_ph) if out_ph else np.empty(0),
                                np.concatenate(out_beat).astype(int) if out_beat else np.empty(0, int),
                                gathered)
