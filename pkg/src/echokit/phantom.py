"""Synthetic exams with analytic ground truth.

A contracting-annulus tissue model (anisotropic scaling about a fixed
center) drives every stream from one closed-form displacement field, so the
true tissue velocity, B-mode texture advection, contours, and meshes are
all mutually consistent. A parabolic jet inside the cavity provides blood
velocity and Doppler power, wrapped into the Nyquist range to exercise
aliasing. The ECG is a sum of Gaussians per beat with known R-peak times.

The module also carries an intentionally naive, loop-based implementation
of the benchmark loss terms (ground_truth_loss) that shares no code with
the metrics module and is used to cross-check it end to end.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .annotations import AnnotationSet, Contour2D, Mesh3D, MeshFrame, SparseMarker
from .container import ExamManifest, Recording, Stream, ecg_stream, make_stream
from .errors import ValidationError
from .geometry import (SectorGeometry2D, SphericalGeometry3D, beam_to_cartesian,
                       spherical_to_cartesian)
from .metrics import wrap_velocity
from .timing import EcgTrace, RPeakList, SubAcquisition

COLOR_BOX_LABEL = "color_box"


def default_sector() -> SectorGeometry2D:
    return SectorGeometry2D(theta0=-0.6, dtheta=1.2 / 63, n_beams=64,
                            r0=0.010, dr=0.0006, n_samples=160)


def default_spherical() -> SphericalGeometry3D:
    return SphericalGeometry3D(theta0=-0.45, dtheta=0.9 / 47, n_beams=48,
                               r0=0.010, dr=0.0012, n_samples=80,
                               phi0=-0.25, dphi=0.5 / 5, n_planes=6)


@dataclass(frozen=True)
class PhantomConfig:
    """Everything that determines a phantom exam (deterministic per seed)."""

    geometry: SectorGeometry2D = field(default_factory=default_sector)
    geometry3d: SphericalGeometry3D = field(default_factory=default_spherical)
    heart_rate: float = 75.0          # bpm
    n_beats: int = 3
    bmode_fps: float = 30.0           # tissue recording B-mode rate
    tissue_doppler_ratio: int = 1     # TDI frames per B-mode frame
    flow_bmode_fps: float = 10.5      # flow recording B-mode rate
    flow_doppler_ratio: int = 2       # color frames per B-mode frame
    motion_amplitude: float = 0.004   # endocardial radius excursion, meters
    jet_peak_velocity: float = 1.2    # m/s; may exceed nyquist_flow
    nyquist_tissue: float = 0.16      # m/s
    nyquist_flow: float = 0.605       # m/s
    snr_db: float | None = 25.0       # None disables noise everywhere
    rr_cv: float = 0.0                # injected RR coefficient of variation
    seed: int = 0
    ecg_rate: float = 600.0
    volume_fps: float = 12.0
    include_volume: bool = True
    n_subacquisitions: int = 0        # >= 2 adds a gated stitching recording
    gated_fps: float = 25.0

    def __post_init__(self):
        bad = []
        if not 30.0 <= self.heart_rate <= 180.0:
            bad.append("PhantomConfig.heart_rate must lie in [30, 180] bpm")
        if self.n_beats < 1:
            bad.append("PhantomConfig.n_beats must be >= 1")
        if self.tissue_doppler_ratio < 1 or self.flow_doppler_ratio < 1:
            bad.append("PhantomConfig doppler ratios must be >= 1")
        if self.nyquist_tissue <= 0 or self.nyquist_flow <= 0:
            bad.append("PhantomConfig nyquist velocities must be positive")
        if self.motion_amplitude < 0:
            bad.append("PhantomConfig.motion_amplitude must be >= 0")
        if self.rr_cv < 0:
            bad.append("PhantomConfig.rr_cv must be >= 0")
        if self.n_subacquisitions == 1 or self.n_subacquisitions < 0:
            bad.append("PhantomConfig.n_subacquisitions must be 0 or >= 2")
        if self.n_subacquisitions >= 2 and self.n_beats < self.n_subacquisitions:
            bad.append("PhantomConfig.n_beats must cover every sub-acquisition")
        if bad:
            raise ValidationError(bad)


# annulus model constants (meters)
_CENTER = (0.0, 0.060)
_R_ENDO0 = 0.020
_R_EPI0 = 0.032
_EDGE = 0.0025
_Z_ANISOTROPY = 0.6     # fz = _Z_ANISOTROPY * fx
_JET_WIDTH = 0.006
_JET_HALFLEN = 0.008
_BOX_THETA = 0.28       # half-angle of the operator box
_BOX_DEPTH = 0.022      # half-extent in depth around the annulus center


def _smoothstep(u):
    u = np.clip(u, 0.0, 1.0)
    return u * u * (3.0 - 2.0 * u)


def _annulus_window(m):
    """1 inside [R_ENDO0, R_EPI0] (material radius), smooth taper of width
    _EDGE into the cavity and the far field."""
    inner = _smoothstep((m - (_R_ENDO0 - _EDGE)) / _EDGE)
    outer = 1.0 - _smoothstep((m - _R_EPI0) / _EDGE)
    return inner * outer


class _Texture:
    """Static material-frame texture: a seeded sum of Gaussian blobs."""

    def __init__(self, rng: np.random.Generator):
        k = 24
        self.cx = _CENTER[0] + rng.uniform(-1.4 * _R_EPI0, 1.4 * _R_EPI0, k)
        self.cz = _CENTER[1] + rng.uniform(-1.4 * _R_EPI0, 1.4 * _R_EPI0, k)
        self.sigma = rng.uniform(0.002, 0.006, k)
        self.amp = rng.uniform(-1.0, 1.0, k)

    def __call__(self, x, z):
        acc = np.zeros(np.broadcast(x, z).shape)
        for cx, cz, s, a in zip(self.cx, self.cz, self.sigma, self.amp):
            acc += a * np.exp(-((x - cx) ** 2 + (z - cz) ** 2) / (2.0 * s * s))
        return 0.5 + 0.5 * np.tanh(1.5 * acc)


class _Beats:
    """Deterministic beat grid with an exact injected RR coefficient of
    variation (alternating long/short pattern)."""

    def __init__(self, cfg: PhantomConfig):
        rr = 60.0 / cfg.heart_rate
        n = cfg.n_beats
        if cfg.rr_cv > 0 and n >= 2:
            pattern = np.array([1.0 if k % 2 == 0 else -1.0 for k in range(n)])
            pattern -= pattern.mean()
            pattern /= np.std(pattern, ddof=1)
            intervals = rr * (1.0 + cfg.rr_cv * pattern)
        else:
            intervals = np.full(n, rr)
        if np.min(intervals) <= 0.3:
            raise ValidationError("rr_cv too large for the configured heart rate")
        lead = 0.35 * rr
        self.intervals = intervals
        self.peaks = lead + np.concatenate(([0.0], np.cumsum(intervals)))
        self.duration = self.peaks[-1] + lead

    def phase(self, t):
        """Cardiac phase, linearly extended before the first and after the
        last peak (the waveform is periodic in phase)."""
        t = np.asarray(t, float)
        k = np.clip(np.searchsorted(self.peaks, t, side="right") - 1,
                    0, self.peaks.size - 2)
        rr = self.peaks[k + 1] - self.peaks[k]
        return (t - self.peaks[k]) / rr, 1.0 / rr


def _scales(phase, fx, fz):
    s = np.sin(np.pi * phase) ** 2
    return 1.0 - fx * s, 1.0 - fz * s


def _scale_rates(phase, dphase_dt, fx, fz):
    ds = np.pi * np.sin(2.0 * np.pi * phase) * dphase_dt
    return -fx * ds, -fz * ds


class _TissueModel:
    """Contracting annulus: anisotropic scaling about a fixed center."""

    def __init__(self, cfg: PhantomConfig, beats: _Beats, texture: _Texture):
        self.beats = beats
        self.texture = texture
        self.fx = cfg.motion_amplitude / _R_ENDO0
        self.fz = _Z_ANISOTROPY * self.fx
        if self.fx >= 0.5:
            raise ValidationError("motion_amplitude too large for the annulus")

    def fields(self, x, z, t):
        """(bmode, radial_velocity) of the tissue at spatial points and time t."""
        cx, cz = _CENTER
        p, pdot = self.beats.phase(t)
        lx, lz = _scales(p, self.fx, self.fz)
        dlx, dlz = _scale_rates(p, pdot, self.fx, self.fz)
        mx = (x - cx) / lx
        mz = (z - cz) / lz
        m = np.hypot(mx, mz)
        w = _annulus_window(m)
        bmode = 0.06 + w * (0.50 + 0.30 * self.texture(cx + mx, cz + mz))
        vx = mx * dlx
        vz = mz * dlz
        rad = np.hypot(x, z)
        rad = np.where(rad > 0, rad, 1.0)
        tdi = w * (vx * x + vz * z) / rad
        return bmode, tdi


class _JetModel:
    """Parabolic inflow jet along +z through the annulus center."""

    def __init__(self, cfg: PhantomConfig, beats: _Beats):
        self.beats = beats
        self.peak = cfg.jet_peak_velocity

    def profile(self, x, z):
        cx, cz = _CENTER
        lateral = np.maximum(0.0, 1.0 - ((x - cx) / _JET_WIDTH) ** 2)
        axial = np.exp(-((z - cz) / _JET_HALFLEN) ** 4)
        return lateral * axial

    def fields(self, x, z, t):
        """(radial_velocity, power) of the jet at spatial points and time t."""
        p, _ = self.beats.phase(t)
        prof = self.profile(x, z)
        vz = self.peak * prof * np.sin(np.pi * p) ** 2
        rad = np.hypot(x, z)
        rad = np.where(rad > 0, rad, 1.0)
        return vz * z / rad, 0.04 + 0.82 * prof


def _interleaved_times(fps: float, ratio: int, duration: float):
    """(slow_times, fast_times): slow frames on the fps grid, fast frames at
    ratio per slow slot, offset to interleave exactly."""
    dt = 1.0 / fps
    dtf = dt / ratio
    slow = np.arange(0.0, duration, dt)
    fast = (np.arange(int(duration / dtf)) + 0.5) * dtf
    fast = fast[fast <= duration]
    return slow, fast


def _ecg_waveform(beats: _Beats, rate: float) -> np.ndarray:
    t = np.arange(int(round(beats.duration * rate))) / rate
    x = np.zeros_like(t)
    rr_of = np.concatenate((beats.intervals, beats.intervals[-1:]))
    for k, tk in enumerate(beats.peaks):
        rr = rr_of[min(k, rr_of.size - 1)]
        x += 1.00 * np.exp(-0.5 * ((t - tk) / 0.010) ** 2)
        x += 0.12 * np.exp(-0.5 * ((t - (tk - 0.20 * rr)) / 0.025) ** 2)
        x += 0.25 * np.exp(-0.5 * ((t - (tk + 0.30 * rr)) / 0.050) ** 2)
    return x


def _smooth_noise_1d(rng, n, sigma_target, rate_sigma=12.0):
    # rate_sigma in samples; 12 at 600 Hz keeps the noise well below the
    # QRS band so the trace models wander/respiration artifacts
    if sigma_target <= 0:
        return np.zeros(n)
    half = int(4 * rate_sigma)
    u = np.arange(-half, half + 1)
    k = np.exp(-0.5 * (u / rate_sigma) ** 2)
    k /= k.sum()
    gain = math.sqrt(float(np.sum(k * k)))
    raw = rng.standard_normal(n + 2 * half)
    return np.convolve(raw, k, mode="valid")[:n] * (sigma_target / gain)


def _smooth_noise_nd(rng, shape, sigma_target):
    """Band-limited spatial noise: white noise smoothed with a separable
    [1, 2, 1]/4 kernel along the last two axes, rescaled to sigma_target."""
    if sigma_target <= 0:
        return np.zeros(shape)
    raw = rng.standard_normal(shape)

    def smooth(a, axis):
        p = np.pad(a, [(1, 1) if ax == axis else (0, 0)
                       for ax in range(a.ndim)], mode="edge")
        sl = [slice(None)] * a.ndim
        out = 0.5 * a.copy()
        for off in (0, 2):
            sl[axis] = slice(off, off + a.shape[axis])
            out += 0.25 * p[tuple(sl)]
        return out

    for axis in (-2, -1):
        raw = smooth(raw, axis % raw.ndim)
    return raw * (sigma_target / 0.375)


class PhantomExam(NamedTuple):
    manifest: ExamManifest
    recordings: dict
    truth: "GroundTruth"


@dataclass
class GroundTruth:
    """Noise-free analytic fields and timing truth for every recording."""

    config: PhantomConfig
    r_peak_times: np.ndarray
    beat_intervals: np.ndarray
    ecg_clean: np.ndarray
    tissue_bmode_times: np.ndarray
    tissue_tdi_times: np.ndarray
    tissue_bmode: np.ndarray
    tissue_tdi_true: np.ndarray          # unwrapped radial velocity, m/s
    tissue_tdi_wrapped: np.ndarray
    flow_bmode_times: np.ndarray
    flow_color_times: np.ndarray
    flow_bmode: np.ndarray
    flow_velocity_true: np.ndarray       # unwrapped radial velocity, m/s
    flow_velocity_wrapped: np.ndarray
    flow_power: np.ndarray
    flow_box: np.ndarray                 # (n_beams, n_samples) bool
    cine_times: np.ndarray
    cine_scale_x: np.ndarray
    cine_scale_z: np.ndarray
    mesh_times: np.ndarray | None = None
    mesh_volumes_ml: np.ndarray | None = None
    gated_direct: np.ndarray | None = None   # (T, planes, beams, samples)
    gated_direct_times: np.ndarray | None = None
    gated_subacqs: list | None = None

    @property
    def peaks(self) -> RPeakList:
        return RPeakList(self.r_peak_times)

    def tissue_scales(self, t):
        """(scale_x, scale_z) of the annulus at time(s) t."""
        beats = _Beats.__new__(_Beats)
        beats.peaks = self.r_peak_times
        beats.intervals = self.beat_intervals
        beats.duration = self.r_peak_times[-1]
        p, _ = beats.phase(t)
        fx = self.config.motion_amplitude / _R_ENDO0
        return _scales(p, fx, _Z_ANISOTROPY * fx)

    def endo_contour_at(self, t, n_vertices: int = 120) -> np.ndarray:
        lx, lz = self.tissue_scales(t)
        return _ellipse(_R_ENDO0 * lx, _R_ENDO0 * lz, n_vertices)

    def epi_contour_at(self, t, n_vertices: int = 120) -> np.ndarray:
        lx, lz = self.tissue_scales(t)
        return _ellipse(_R_EPI0 * lx, _R_EPI0 * lz, n_vertices)


def _ellipse(ax, az, n):
    alpha = 2.0 * np.pi * np.arange(n) / n
    return np.column_stack((_CENTER[0] + ax * np.cos(alpha),
                            _CENTER[1] + az * np.sin(alpha)))


def unit_icosphere(subdivisions: int = 3) -> MeshFrame:
    """Unit sphere mesh from recursive icosahedron subdivision
    (20 * 4**subdivisions outward-wound triangles)."""
    phi = (1.0 + math.sqrt(5.0)) / 2.0
    verts = [(-1, phi, 0), (1, phi, 0), (-1, -phi, 0), (1, -phi, 0),
             (0, -1, phi), (0, 1, phi), (0, -1, -phi), (0, 1, -phi),
             (phi, 0, -1), (phi, 0, 1), (-phi, 0, -1), (-phi, 0, 1)]
    verts = [np.array(v, float) / np.linalg.norm(v) for v in verts]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
             (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
             (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
             (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    for _ in range(subdivisions):
        cache: dict = {}

        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    return MeshFrame(np.array(verts), np.array(faces, np.uint32))


def _beam_positions_2d(geom: SectorGeometry2D):
    b = np.arange(geom.n_beams, dtype=float)[:, None]
    s = np.arange(geom.n_samples, dtype=float)[None, :]
    return beam_to_cartesian(geom, b, s)


def _box_ranges(geom: SectorGeometry2D):
    thetas = geom.theta0 + geom.dtheta * np.arange(geom.n_beams)
    radii = geom.r0 + geom.dr * np.arange(geom.n_samples)
    beams = np.flatnonzero(np.abs(thetas) <= _BOX_THETA)
    samples = np.flatnonzero(np.abs(radii - _CENTER[1]) <= _BOX_DEPTH)
    if beams.size == 0 or samples.size == 0:
        raise ValidationError("geometry does not cover the phantom color box")
    return (int(beams[0]), int(beams[-1]) + 1), (int(samples[0]), int(samples[-1]) + 1)


def _box_marker(beam_range, sample_range) -> SparseMarker:
    coords = [[beam_range[0], sample_range[0]], [beam_range[1], sample_range[1]]]
    return SparseMarker("line", np.asarray(coords, float), COLOR_BOX_LABEL,
                        "beamspace")


def box_mask_from_marker(marker: SparseMarker, shape) -> np.ndarray:
    """Reconstruct the boolean color-box region from its marker form."""
    (b0, s0), (b1, s1) = marker.coords
    mask = np.zeros(shape, bool)
    mask[int(b0):int(b1), int(s0):int(s1)] = True
    return mask


def _gated_field(geom3: SphericalGeometry3D, phase):
    """Smooth phase-dependent 3D field used by the gated recordings."""
    p = np.arange(geom3.n_planes, dtype=float)[:, None, None]
    b = np.arange(geom3.n_beams, dtype=float)[None, :, None]
    s = np.arange(geom3.n_samples, dtype=float)[None, None, :]
    phi = geom3.phi0 + p * geom3.dphi
    theta = geom3.theta0 + b * geom3.dtheta
    r = geom3.r0 + s * geom3.dr
    depth = geom3.dr * (geom3.n_samples - 1)
    wobble = 0.8 * np.sin(2.0 * np.pi * phase)
    return (0.5
            + 0.30 * np.sin(3.0 * theta + wobble) * np.cos(2.0 * phi)
            * np.cos(1.5 * 2.0 * np.pi * (r - geom3.r0) / depth
                     + 0.5 * np.sin(2.0 * np.pi * phase)))


def generate_exam(cfg: PhantomConfig | None = None) -> PhantomExam:
    """Build the phantom exam: tissue, flow, and cine recordings, plus an
    ECG-meshed volume recording and optional gated sub-acquisitions.

    Deterministic for a fixed config; the returned GroundTruth holds the
    noise-free fields and true beat times.
    """
    cfg = cfg or PhantomConfig()
    rng = np.random.default_rng(cfg.seed)
    texture = _Texture(rng)
    beats = _Beats(cfg)
    tissue = _TissueModel(cfg, beats, texture)
    jet = _JetModel(cfg, beats)
    geom = cfg.geometry
    x2, z2 = _beam_positions_2d(geom)
    sigma = 0.0 if cfg.snr_db is None else 10.0 ** (-cfg.snr_db / 20.0)

    def stack(times, fn):
        return np.stack([fn(t) for t in times])

    # ECG shared by every recording
    ecg_clean = _ecg_waveform(beats, cfg.ecg_rate)
    ecg_noisy = ecg_clean + _smooth_noise_1d(rng, ecg_clean.size, sigma)
    trace = EcgTrace(ecg_noisy, cfg.ecg_rate, 0.0)

    def with_noise(clean, scale, wrap_to=None):
        noisy = clean + _smooth_noise_nd(rng, clean.shape, sigma * scale)
        if wrap_to is not None:
            return wrap_velocity(noisy, wrap_to)
        return np.clip(noisy, 0.0, 1.0)

    recordings: dict = {}

    # tissue recording: interleaved B-mode + TDI
    tb_times, td_times = _interleaved_times(cfg.bmode_fps,
                                            cfg.tissue_doppler_ratio,
                                            beats.duration)
    tissue_bmode = stack(tb_times, lambda t: tissue.fields(x2, z2, t)[0])
    tissue_tdi = stack(td_times, lambda t: tissue.fields(x2, z2, t)[1])
    tissue_tdi_wrapped = wrap_velocity(tissue_tdi, cfg.nyquist_tissue)
    recordings["tissue"] = Recording(
        "tissue",
        (make_stream("bmode2d", with_noise(tissue_bmode, 1.0), tb_times,
                     geometry_id=0),
         make_stream("tdi2d",
                     with_noise(tissue_tdi_wrapped, cfg.nyquist_tissue,
                                wrap_to=cfg.nyquist_tissue),
                     td_times, nyquist_velocity=cfg.nyquist_tissue,
                     geometry_id=0),
         ecg_stream(trace)),
        {0: geom})

    # flow recording: interleaved B-mode + color (velocity, power) + box
    fb_times, fc_times = _interleaved_times(cfg.flow_bmode_fps,
                                            cfg.flow_doppler_ratio,
                                            beats.duration)
    flow_bmode = stack(fb_times, lambda t: tissue.fields(x2, z2, t)[0])
    flow_v = stack(fc_times, lambda t: jet.fields(x2, z2, t)[0])
    flow_p = stack(fc_times, lambda t: jet.fields(x2, z2, t)[1])
    flow_v_wrapped = wrap_velocity(flow_v, cfg.nyquist_flow)
    beam_range, sample_range = _box_ranges(geom)
    box_mask = np.zeros((geom.n_beams, geom.n_samples), bool)
    box_mask[beam_range[0]:beam_range[1], sample_range[0]:sample_range[1]] = True
    color = np.stack([with_noise(flow_v_wrapped, cfg.nyquist_flow,
                                 wrap_to=cfg.nyquist_flow),
                      with_noise(flow_p, 1.0)], axis=1)
    recordings["flow"] = Recording(
        "flow",
        (make_stream("bmode2d", with_noise(flow_bmode, 1.0), fb_times,
                     geometry_id=0),
         make_stream("color2d", color, fc_times,
                     nyquist_velocity=cfg.nyquist_flow, geometry_id=0),
         ecg_stream(trace)),
        {0: geom},
        AnnotationSet(markers=[_box_marker(beam_range, sample_range)]))

    # cine recording: B-mode with endo/epi contours on every frame
    cine_times = tb_times
    cine_bmode = tissue_bmode
    cine_p, _ = beats.phase(cine_times)
    fx = tissue.fx
    lx, lz = _scales(cine_p, fx, _Z_ANISOTROPY * fx)
    endo = Contour2D([_ellipse(_R_ENDO0 * a, _R_ENDO0 * b, 120)
                      for a, b in zip(lx, lz)], "LV", "endo", "A4C")
    epi = Contour2D([_ellipse(_R_EPI0 * a, _R_EPI0 * b, 120)
                     for a, b in zip(lx, lz)], "LV", "epi", "A4C")
    recordings["cine"] = Recording(
        "cine",
        (make_stream("bmode2d", with_noise(cine_bmode, 1.0), cine_times,
                     geometry_id=0),
         ecg_stream(trace)),
        {0: geom},
        AnnotationSet(contours=[endo, epi]))

    truth = GroundTruth(
        config=cfg, r_peak_times=beats.peaks, beat_intervals=beats.intervals,
        ecg_clean=ecg_clean,
        tissue_bmode_times=tb_times, tissue_tdi_times=td_times,
        tissue_bmode=tissue_bmode, tissue_tdi_true=tissue_tdi,
        tissue_tdi_wrapped=tissue_tdi_wrapped,
        flow_bmode_times=fb_times, flow_color_times=fc_times,
        flow_bmode=flow_bmode, flow_velocity_true=flow_v,
        flow_velocity_wrapped=flow_v_wrapped, flow_power=flow_p,
        flow_box=box_mask,
        cine_times=cine_times, cine_scale_x=lx, cine_scale_z=lz)

    # volume recording: small 3D B-mode over one beat with LV meshes
    if cfg.include_volume:
        geom3 = cfg.geometry3d
        rr = beats.intervals[0]
        nf = max(int(rr * cfg.volume_fps), 4)
        mesh_times = beats.peaks[0] + (np.arange(nf) + 0.5) * rr / nf
        p3 = np.arange(geom3.n_planes, dtype=float)[:, None, None]
        b3 = np.arange(geom3.n_beams, dtype=float)[None, :, None]
        s3 = np.arange(geom3.n_samples, dtype=float)[None, None, :]
        x3, y3, z3 = spherical_to_cartesian(geom3, p3, b3, s3)
        sphere = unit_icosphere(3)

        def volume_frame(t):
            p, _ = beats.phase(t)
            sx, sz = _scales(p, fx, _Z_ANISOTROPY * fx)
            mx = x3 / sx
            my = y3 / sx
            mz = (z3 - _CENTER[1]) / sz
            m = np.sqrt(mx * mx + my * my + mz * mz)
            w = _annulus_window(m)
            return 0.06 + w * (0.65 + 0.15 * np.cos(300.0 * m))

        vol = stack(mesh_times, volume_frame)
        p_mesh, _ = beats.phase(mesh_times)
        sx, sz = _scales(p_mesh, fx, _Z_ANISOTROPY * fx)
        frames = []
        for a, c in zip(sx, sz):
            verts = sphere.vertices * np.array([_R_ENDO0 * a, _R_ENDO0 * a,
                                                _R_ENDO0 * c])
            verts[:, 2] += _CENTER[1]
            frames.append(MeshFrame(verts, sphere.triangles))
        recordings["volume"] = Recording(
            "volume",
            (make_stream("bmode3d", with_noise(vol, 1.0), mesh_times,
                         geometry_id=0),
             ecg_stream(trace)),
            {0: geom3},
            AnnotationSet(meshes=[Mesh3D(frames)]))
        truth.mesh_times = mesh_times
        truth.mesh_volumes_ml = (4.0 / 3.0 * np.pi * _R_ENDO0 ** 3
                                 * sx * sx * sz * 1e6)

    # gated recording: azimuth slices acquired on consecutive beats
    if cfg.n_subacquisitions >= 2:
        geom3 = cfg.geometry3d
        k_sub = cfg.n_subacquisitions
        chunk = geom3.n_beams // k_sub
        if chunk * k_sub != geom3.n_beams:
            raise ValidationError("n_subacquisitions must divide the beam count")
        streams = []
        geoms = {}
        subacqs = []
        for k in range(k_sub):
            sub_geom = SphericalGeometry3D(
                geom3.theta0 + k * chunk * geom3.dtheta, geom3.dtheta, chunk,
                geom3.r0, geom3.dr, geom3.n_samples,
                geom3.phi0, geom3.dphi, geom3.n_planes)
            rr = beats.intervals[k]
            nf = max(int(rr * cfg.gated_fps), 4)
            times = beats.peaks[k] + (np.arange(nf) + 0.5 + 0.17 * k) / (nf + 1) * rr
            phases, _ = beats.phase(times)
            frames = np.stack([
                _gated_field(geom3, ph)[:, k * chunk:(k + 1) * chunk, :]
                for ph in phases])
            geoms[k] = sub_geom
            streams.append(make_stream("bmode3d", frames, times, geometry_id=k))
            subacqs.append(SubAcquisition(frames, times, k * chunk))
        streams.append(ecg_stream(trace))
        recordings["gated"] = Recording("gated", tuple(streams), geoms)
        rr0 = beats.intervals[0]
        nf0 = max(int(rr0 * cfg.gated_fps), 4)
        direct_times = beats.peaks[0] + (np.arange(nf0) + 0.5) / (nf0 + 1) * rr0
        direct_phases, _ = beats.phase(direct_times)
        truth.gated_direct = np.stack([_gated_field(geom3, ph)
                                       for ph in direct_phases])
        truth.gated_direct_times = direct_times
        truth.gated_subacqs = subacqs

    manifest = ExamManifest(f"phantom-{cfg.seed:04d}", sorted(recordings),
                            patient_key=f"patient-{cfg.seed:04d}")
    return PhantomExam(manifest, recordings, truth)


# ---------------------------------------------------------------------------
# independent loss oracle (plain loops, no shared code with the metrics
# module; used to cross-check it)


def naive_turbulence(v) -> np.ndarray:
    """Loop-based 3x3 population std with edge replication."""
    v = np.asarray(v, float)
    if v.ndim == 3:
        return np.stack([naive_turbulence(f) for f in v])
    h, w = v.shape
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            vals = []
            for di in (-1, 0, 1):
                for dj in (-1, 0, 1):
                    ii = min(max(i + di, 0), h - 1)
                    jj = min(max(j + dj, 0), w - 1)
                    vals.append(v[ii, jj])
            mean = sum(vals) / 9.0
            out[i, j] = math.sqrt(sum((u - mean) ** 2 for u in vals) / 9.0)
    return out


def _naive_alias(a, b, nyquist):
    best = None
    for k in range(-10, 11):
        cand = abs(a - b + 2.0 * k * nyquist)
        if best is None or cand < best:
            best = cand
    return best / nyquist


def ground_truth_loss(target: dict, pred: dict, *, nyquist: float | None = None,
                      valid=None, tau_power: float = 0.3,
                      tau_bmode: float = 0.4) -> dict:
    """Loop-based benchmark loss terms for cross-checking the fast path.

    target/pred are dicts of aligned arrays. With only "velocity" present
    the result is the alias-normalized L1 term; when both carry "power" the
    flow-task terms are computed, with the reliability mask rebuilt from
    target["box"], target["power"], and target["bmode"]. valid optionally
    restricts scoring to in-sector pixels. Masked terms over an empty mask
    are reported as None.
    """
    tv = np.asarray(target["velocity"], float)
    pv = np.asarray(pred["velocity"], float)
    if tv.shape != pv.shape:
        raise ValidationError("target/pred velocity shapes differ")
    frames = tv.reshape(tv.shape[0], -1)
    pframes = pv.reshape(tv.shape[0], -1)
    if valid is None:
        vflat = np.ones(frames.shape[1], bool)
    else:
        vflat = np.asarray(valid, bool).reshape(-1)

    if "power" not in pred:
        if nyquist is None:
            raise ValidationError("nyquist required for the velocity-only term")
        total, count = 0.0, 0
        for t in range(frames.shape[0]):
            for j in range(frames.shape[1]):
                if vflat[j]:
                    total += _naive_alias(pframes[t, j], frames[t, j], nyquist)
                    count += 1
        return {"velocity": total / count}

    tp = np.asarray(target["power"], float).reshape(tv.shape[0], -1)
    pp = np.asarray(pred["power"], float).reshape(tv.shape[0], -1)
    ts = np.asarray(target["variation"], float).reshape(tv.shape[0], -1)
    ps = np.asarray(pred["variation"], float).reshape(tv.shape[0], -1)
    box = np.asarray(target["box"], bool).reshape(tv.shape[0], -1)
    bm = np.asarray(target["bmode"], float).reshape(tv.shape[0], -1)

    pow_total, pow_n = 0.0, 0
    v_total, s_total, m_n = 0.0, 0.0, 0
    for t in range(frames.shape[0]):
        for j in range(frames.shape[1]):
            if not vflat[j]:
                continue
            pow_total += abs(pp[t, j] - tp[t, j])
            pow_n += 1
            if box[t, j] and tp[t, j] >= tau_power and bm[t, j] <= tau_bmode:
                v_total += abs(pframes[t, j] - frames[t, j])
                s_total += abs(ps[t, j] - ts[t, j])
                m_n += 1
    return {"velocity": v_total / m_n if m_n else None,
            "power": pow_total / pow_n,
            "variation": s_total / m_n if m_n else None}
