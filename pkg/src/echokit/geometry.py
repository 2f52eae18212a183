"""Probe-centered acquisition geometry and scan conversion.

Beamspace frames are indexed (beam, sample): beam b fires at steering angle
theta0 + b*dtheta and sample s lies at depth r0 + s*dr along the beam. The
Cartesian frame puts the probe apex at the origin with z pointing into the
body and x across the sector, so x = r*sin(theta), z = r*cos(theta).

3D acquisitions add elevation planes phi0 + p*dphi and use

    x = r*sin(theta)*cos(phi),  y = r*sin(phi),  z = r*cos(theta)*cos(phi)

(azimuth steering applied within each elevation plane). Converted 2D images
are indexed [row, col] = [z, x]; converted 3D volumes are indexed
[plane, row, col] = [y, z, x], so volume[k] is the (z, x) image of one
y-plane.

Interpolation is bilinear/trilinear. Fractional indices within half a cell
of the first/last beam or sample are clamped onto the grid; anything
further out is outside the sector (mask false, value 0).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True)
class SectorGeometry2D:
    """Uniform beam/sample spacing of a 2D sector acquisition."""

    theta0: float  # first beam steering angle, radians
    dtheta: float  # radians per beam (may be negative)
    n_beams: int
    r0: float      # depth of first sample, meters
    dr: float      # meters per sample
    n_samples: int

    def __post_init__(self):
        bad = []
        if self.dtheta == 0.0:
            bad.append("SectorGeometry2D.dtheta must be nonzero")
        if self.dr <= 0.0:
            bad.append("SectorGeometry2D.dr must be positive")
        if self.r0 < 0.0:
            bad.append("SectorGeometry2D.r0 must be nonnegative")
        if self.n_beams < 2:
            bad.append("SectorGeometry2D.n_beams must be >= 2")
        if self.n_samples < 2:
            bad.append("SectorGeometry2D.n_samples must be >= 2")
        if abs(self.dtheta) * (self.n_beams - 1) >= np.pi:
            bad.append("SectorGeometry2D span must be < pi")
        if bad:
            raise ValidationError(bad)

    @property
    def theta_last(self) -> float:
        return self.theta0 + self.dtheta * (self.n_beams - 1)

    @property
    def r_last(self) -> float:
        return self.r0 + self.dr * (self.n_samples - 1)

    @property
    def span(self) -> float:
        return abs(self.dtheta) * (self.n_beams - 1)


@dataclass(frozen=True)
class SphericalGeometry3D:
    """Sector geometry plus uniformly spaced elevation planes."""

    theta0: float
    dtheta: float
    n_beams: int
    r0: float
    dr: float
    n_samples: int
    phi0: float    # first elevation plane, radians
    dphi: float    # radians per plane
    n_planes: int

    def __post_init__(self):
        bad = []
        try:
            SectorGeometry2D(self.theta0, self.dtheta, self.n_beams,
                             self.r0, self.dr, self.n_samples)
        except ValidationError as e:
            bad.extend(v.replace("SectorGeometry2D", "SphericalGeometry3D")
                       for v in e.violations)
        if self.dphi == 0.0:
            bad.append("SphericalGeometry3D.dphi must be nonzero")
        if self.n_planes < 2:
            bad.append("SphericalGeometry3D.n_planes must be >= 2")
        elif abs(self.dphi) * (self.n_planes - 1) >= np.pi:
            bad.append("SphericalGeometry3D elevation span must be < pi")
        if bad:
            raise ValidationError(bad)

    @property
    def azimuth(self) -> SectorGeometry2D:
        """The 2D sector obtained by dropping the elevation axis."""
        return SectorGeometry2D(self.theta0, self.dtheta, self.n_beams,
                                self.r0, self.dr, self.n_samples)

    @property
    def theta_last(self) -> float:
        return self.theta0 + self.dtheta * (self.n_beams - 1)

    @property
    def r_last(self) -> float:
        return self.r0 + self.dr * (self.n_samples - 1)

    @property
    def phi_last(self) -> float:
        return self.phi0 + self.dphi * (self.n_planes - 1)


@dataclass(frozen=True)
class CartesianGrid2D:
    """Isotropic pixel grid; origin is the (x, z) of pixel (0, 0)'s center."""

    origin: tuple[float, float]
    spacing: float
    width: int
    height: int

    def __post_init__(self):
        bad = []
        if self.spacing <= 0.0:
            bad.append("CartesianGrid2D.spacing must be positive")
        if self.width < 1 or self.height < 1:
            bad.append("CartesianGrid2D.width/height must be >= 1")
        if bad:
            raise ValidationError(bad)

    def pixel_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """(x, z) coordinate arrays of shape (height, width)."""
        ox, oz = self.origin
        xs = ox + self.spacing * np.arange(self.width)
        zs = oz + self.spacing * np.arange(self.height)
        x = np.broadcast_to(xs[None, :], (self.height, self.width))
        z = np.broadcast_to(zs[:, None], (self.height, self.width))
        return x, z


@dataclass(frozen=True)
class CartesianGrid3D:
    """Isotropic voxel grid; origin is the (x, y, z) of voxel (0, 0, 0)'s center.

    Volumes built on this grid are indexed [plane, row, col] = [y, z, x].
    """

    origin: tuple[float, float, float]
    spacing: float
    width: int   # x
    height: int  # z
    depth: int   # y

    def __post_init__(self):
        bad = []
        if self.spacing <= 0.0:
            bad.append("CartesianGrid3D.spacing must be positive")
        if min(self.width, self.height, self.depth) < 1:
            bad.append("CartesianGrid3D dimensions must be >= 1")
        if bad:
            raise ValidationError(bad)

    def voxel_centers(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(x, y, z) coordinate arrays of shape (depth, height, width)."""
        ox, oy, oz = self.origin
        xs = ox + self.spacing * np.arange(self.width)
        ys = oy + self.spacing * np.arange(self.depth)
        zs = oz + self.spacing * np.arange(self.height)
        shape = (self.depth, self.height, self.width)
        x = np.broadcast_to(xs[None, None, :], shape)
        y = np.broadcast_to(ys[:, None, None], shape)
        z = np.broadcast_to(zs[None, :, None], shape)
        return x, y, z


def beam_to_cartesian(geom: SectorGeometry2D, beam_idx, sample_idx):
    """Map (possibly fractional) beamspace indices to (x, z) meters."""
    theta = geom.theta0 + np.asarray(beam_idx, float) * geom.dtheta
    r = geom.r0 + np.asarray(sample_idx, float) * geom.dr
    return r * np.sin(theta), r * np.cos(theta)


def cartesian_to_beam(geom: SectorGeometry2D, x, z):
    """Invert beam_to_cartesian.

    Returns (beam_idx, sample_idx, inside) where inside is true when both
    fractional indices fall within [0, n - 1].
    """
    x = np.asarray(x, float)
    z = np.asarray(z, float)
    r = np.hypot(x, z)
    theta = np.arctan2(x, z)
    beam = (theta - geom.theta0) / geom.dtheta
    sample = (r - geom.r0) / geom.dr
    inside = ((beam >= 0.0) & (beam <= geom.n_beams - 1.0)
              & (sample >= 0.0) & (sample <= geom.n_samples - 1.0))
    return beam, sample, inside


def spherical_to_cartesian(geom: SphericalGeometry3D, plane_idx, beam_idx, sample_idx):
    """Map (plane, beam, sample) indices to (x, y, z) meters."""
    phi = geom.phi0 + np.asarray(plane_idx, float) * geom.dphi
    theta = geom.theta0 + np.asarray(beam_idx, float) * geom.dtheta
    r = geom.r0 + np.asarray(sample_idx, float) * geom.dr
    return (r * np.sin(theta) * np.cos(phi),
            r * np.sin(phi),
            r * np.cos(theta) * np.cos(phi))


def cartesian_to_spherical(geom: SphericalGeometry3D, x, y, z):
    """Invert spherical_to_cartesian; returns (plane, beam, sample, inside)."""
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    z = np.asarray(z, float)
    r = np.sqrt(x * x + y * y + z * z)
    phi = np.arctan2(y, np.hypot(x, z))
    theta = np.arctan2(x, z)
    plane = (phi - geom.phi0) / geom.dphi
    beam = (theta - geom.theta0) / geom.dtheta
    sample = (r - geom.r0) / geom.dr
    inside = ((plane >= 0.0) & (plane <= geom.n_planes - 1.0)
              & (beam >= 0.0) & (beam <= geom.n_beams - 1.0)
              & (sample >= 0.0) & (sample <= geom.n_samples - 1.0))
    return plane, beam, sample, inside


def _half_cell_valid(idx: np.ndarray, n: int) -> np.ndarray:
    # clamp tolerance: half a cell beyond the first/last index is still usable
    return (idx >= -0.5) & (idx <= n - 0.5)


def _lerp(a, b, t):
    # a + t*(b - a) keeps constants exact and never overshoots [min, max]
    return a + t * (b - a)


def _floor_frac(idx: np.ndarray, n: int):
    idx = np.clip(idx, 0.0, n - 1.0)
    i0 = np.floor(idx).astype(np.intp)
    np.minimum(i0, n - 2, out=i0)
    return i0, idx - i0


class ScanConverter2D:
    """Pixel-to-beamspace map for one (geometry, grid) pair.

    Precomputes interpolation indices and weights once so converting every
    frame of a series costs only four gathers and three lerps.
    """

    def __init__(self, geom: SectorGeometry2D, grid: CartesianGrid2D):
        self.geom = geom
        self.grid = grid
        x, z = grid.pixel_centers()
        bi, si, _ = cartesian_to_beam(geom, x, z)
        self.mask = (_half_cell_valid(bi, geom.n_beams)
                     & _half_cell_valid(si, geom.n_samples))
        self._b0, self._fb = _floor_frac(bi, geom.n_beams)
        self._s0, self._fs = _floor_frac(si, geom.n_samples)

    def __call__(self, frame: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        frame = np.asarray(frame, float)
        if frame.shape != (self.geom.n_beams, self.geom.n_samples):
            raise ValidationError(
                f"frame shape {frame.shape} does not match geometry "
                f"({self.geom.n_beams}, {self.geom.n_samples})")
        b0, s0, fb, fs = self._b0, self._s0, self._fb, self._fs
        v0 = _lerp(frame[b0, s0], frame[b0, s0 + 1], fs)
        v1 = _lerp(frame[b0 + 1, s0], frame[b0 + 1, s0 + 1], fs)
        img = np.where(self.mask, _lerp(v0, v1, fb), 0.0)
        return img, self.mask.copy()


def scan_convert_2d(frame, geom: SectorGeometry2D, grid: CartesianGrid2D):
    """Resample one beamspace frame onto a Cartesian grid.

    Returns (image, validity_mask); pixels outside the sector are 0/false.
    """
    return ScanConverter2D(geom, grid)(frame)


def convert_series(frames: np.ndarray, geom: SectorGeometry2D, grid: CartesianGrid2D):
    """Scan-convert every frame of a (..., n_beams, n_samples) stack.

    Leading axes (time, channels) are preserved. Returns (images, mask)
    where the mask is shared by all frames.
    """
    frames = np.asarray(frames, float)
    conv = ScanConverter2D(geom, grid)
    lead = frames.shape[:-2]
    flat = frames.reshape((-1,) + frames.shape[-2:])
    out = np.empty((flat.shape[0], grid.height, grid.width))
    for i in range(flat.shape[0]):
        out[i], _ = conv(flat[i])
    return out.reshape(lead + (grid.height, grid.width)), conv.mask.copy()


def scan_convert_3d(volume, geom: SphericalGeometry3D, grid: CartesianGrid3D):
    """Trilinear scan conversion of one (n_planes, n_beams, n_samples) volume."""
    volume = np.asarray(volume, float)
    expect = (geom.n_planes, geom.n_beams, geom.n_samples)
    if volume.shape != expect:
        raise ValidationError(
            f"volume shape {volume.shape} does not match geometry {expect}")
    x, y, z = grid.voxel_centers()
    pi, bi, si, _ = cartesian_to_spherical(geom, x, y, z)
    mask = (_half_cell_valid(pi, geom.n_planes)
            & _half_cell_valid(bi, geom.n_beams)
            & _half_cell_valid(si, geom.n_samples))
    p0, fp = _floor_frac(pi, geom.n_planes)
    b0, fb = _floor_frac(bi, geom.n_beams)
    s0, fs = _floor_frac(si, geom.n_samples)
    out = np.zeros(mask.shape)
    for dp in (0, 1):
        v00 = _lerp(volume[p0 + dp, b0, s0], volume[p0 + dp, b0, s0 + 1], fs)
        v01 = _lerp(volume[p0 + dp, b0 + 1, s0], volume[p0 + dp, b0 + 1, s0 + 1], fs)
        plane_val = _lerp(v00, v01, fb)
        out = plane_val if dp == 0 else _lerp(out, plane_val, fp)
    return np.where(mask, out, 0.0), mask


def inverse_scan_convert_2d(image, mask, geom: SectorGeometry2D, grid: CartesianGrid2D):
    """Sample a Cartesian image back onto the beamspace grid.

    Beamspace positions landing outside the grid footprint are set to 0.
    """
    image = np.asarray(image, float)
    if image.shape != (grid.height, grid.width):
        raise ValidationError(
            f"image shape {image.shape} does not match grid "
            f"({grid.height}, {grid.width})")
    if mask is not None:
        mask = np.asarray(mask, bool)
        if mask.shape != image.shape:
            raise ValidationError("mask shape does not match image shape")
        image = np.where(mask, image, 0.0)
    b = np.arange(geom.n_beams, dtype=float)[:, None]
    s = np.arange(geom.n_samples, dtype=float)[None, :]
    x, z = beam_to_cartesian(geom, b, s)
    ox, oz = grid.origin
    ci = (z - oz) / grid.spacing  # rows
    cj = (x - ox) / grid.spacing  # cols
    valid = _half_cell_valid(ci, grid.height) & _half_cell_valid(cj, grid.width)
    i0, fi = _floor_frac(ci, grid.height)
    j0, fj = _floor_frac(cj, grid.width)
    v0 = _lerp(image[i0, j0], image[i0, j0 + 1], fj)
    v1 = _lerp(image[i0 + 1, j0], image[i0 + 1, j0 + 1], fj)
    return np.where(valid, _lerp(v0, v1, fi), 0.0)


def _critical_angles(lo: float, hi: float) -> list[float]:
    angles = [lo, hi]
    angles += [a for a in (-np.pi / 2, 0.0, np.pi / 2) if lo < a < hi]
    return angles


def sector_bounds_2d(geom: SectorGeometry2D):
    """Exact (xmin, xmax, zmin, zmax) of the continuous sector footprint."""
    tlo, thi = sorted((geom.theta0, geom.theta_last))
    xs, zs = [], []
    for t in _critical_angles(tlo, thi):
        for r in (geom.r0, geom.r_last):
            xs.append(r * np.sin(t))
            zs.append(r * np.cos(t))
    return min(xs), max(xs), min(zs), max(zs)


def sector_bounds_3d(geom: SphericalGeometry3D):
    """Exact (xmin, xmax, ymin, ymax, zmin, zmax) of the 3D sector footprint."""
    tlo, thi = sorted((geom.theta0, geom.theta_last))
    plo, phi_hi = sorted((geom.phi0, geom.phi_last))
    xs, ys, zs = [], [], []
    for t in _critical_angles(tlo, thi):
        for p in _critical_angles(plo, phi_hi):
            for r in (geom.r0, geom.r_last):
                xs.append(r * np.sin(t) * np.cos(p))
                ys.append(r * np.sin(p))
                zs.append(r * np.cos(t) * np.cos(p))
    return min(xs), max(xs), min(ys), max(ys), min(zs), max(zs)


def default_grid_for(geom: SectorGeometry2D, size: int = 256) -> CartesianGrid2D:
    """Smallest centered isotropic size x size grid covering the sector bbox."""
    if size < 2:
        raise ValidationError("grid size must be >= 2")
    xmin, xmax, zmin, zmax = sector_bounds_2d(geom)
    spacing = max(xmax - xmin, zmax - zmin) / (size - 1)
    cx = 0.5 * (xmin + xmax)
    cz = 0.5 * (zmin + zmax)
    half = spacing * (size - 1) / 2.0
    return CartesianGrid2D((cx - half, cz - half), spacing, size, size)


def default_grid3_for(geom: SphericalGeometry3D, size: int = 128) -> CartesianGrid3D:
    """3D analogue of default_grid_for (cubic size^3 grid over the bbox)."""
    if size < 2:
        raise ValidationError("grid size must be >= 2")
    xmin, xmax, ymin, ymax, zmin, zmax = sector_bounds_3d(geom)
    spacing = max(xmax - xmin, ymax - ymin, zmax - zmin) / (size - 1)
    half = spacing * (size - 1) / 2.0
    origin = (0.5 * (xmin + xmax) - half,
              0.5 * (ymin + ymax) - half,
              0.5 * (zmin + zmax) - half)
    return CartesianGrid3D(origin, spacing, size, size, size)
