"""Clinical annotations: contours, surface meshes, sparse markers.

Converts them into the representations the benchmarks consume: label masks
(0 background, 1 myocardium, 2 cavity), strain curves from contour arc
length, cavity volumes from closed surface meshes (divergence theorem),
voxel masks, and volume-time curves with end-diastole/end-systole picks.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import ValidationError
from .geometry import CartesianGrid2D, CartesianGrid3D
from .timing import RPeakList

CHAMBERS = ("LV", "LA", "RV")
LAYERS = ("endo", "epi")
VIEWS = ("A2C", "A4C", "ALAX")
MARKER_KINDS = ("point", "line", "sample_volume")
COORD_SPACES = ("cartesian", "beamspace")

ML_PER_M3 = 1e6


@dataclass
class Contour2D:
    """Time-resolved 2D contour: one (n_vertices, 2) array of (x, z) meters
    per frame, with chamber/layer/view tags and the index of the first
    image frame it annotates."""

    frames: list
    chamber: str = "LV"
    layer: str = "endo"
    view: str = "A4C"
    first_frame: int = 0

    def __post_init__(self):
        self.frames = [np.asarray(f, float).reshape(-1, 2) for f in self.frames]
        bad = []
        if not self.frames:
            bad.append("Contour2D.frames must be nonempty")
        if any(f.shape[0] < 3 for f in self.frames):
            bad.append("Contour2D frames need at least 3 vertices")
        if self.chamber not in CHAMBERS:
            bad.append(f"Contour2D.chamber must be one of {CHAMBERS}")
        if self.layer not in LAYERS:
            bad.append(f"Contour2D.layer must be one of {LAYERS}")
        if self.view not in VIEWS:
            bad.append(f"Contour2D.view must be one of {VIEWS}")
        if bad:
            raise ValidationError(bad)

    def __eq__(self, other):
        return (isinstance(other, Contour2D)
                and len(self.frames) == len(other.frames)
                and all(np.array_equal(a, b) for a, b in zip(self.frames, other.frames))
                and (self.chamber, self.layer, self.view, self.first_frame)
                == (other.chamber, other.layer, other.view, other.first_frame))


@dataclass
class MeshFrame:
    """One closed triangle mesh: vertices (nv, 3) meters, triangles (nt, 3)."""

    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, float).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, np.uint32).reshape(-1, 3)
        if self.triangles.size and self.triangles.max() >= len(self.vertices):
            raise ValidationError("MeshFrame.triangles reference missing vertices")

    def __eq__(self, other):
        return (isinstance(other, MeshFrame)
                and np.array_equal(self.vertices, other.vertices)
                and np.array_equal(self.triangles, other.triangles))


@dataclass
class Mesh3D:
    """Per-frame sequence of closed surface meshes."""

    frames: list
    first_frame: int = 0

    def __post_init__(self):
        if not self.frames:
            raise ValidationError("Mesh3D.frames must be nonempty")

    def __eq__(self, other):
        return (isinstance(other, Mesh3D)
                and self.first_frame == other.first_frame
                and self.frames == other.frames)


@dataclass
class SparseMarker:
    """Point, line, or Doppler sample-volume marker.

    coords is interpreted against the declared coordinate space (markers
    carry an explicit space tag rather than assuming one).
    """

    kind: str
    coords: np.ndarray
    label: str = ""
    space: str = "cartesian"

    def __post_init__(self):
        self.coords = np.asarray(self.coords, float)
        bad = []
        if self.kind not in MARKER_KINDS:
            bad.append(f"SparseMarker.kind must be one of {MARKER_KINDS}")
        if self.space not in COORD_SPACES:
            bad.append(f"SparseMarker.space must be one of {COORD_SPACES}")
        if not np.all(np.isfinite(self.coords)):
            bad.append("SparseMarker.coords must be finite")
        if bad:
            raise ValidationError(bad)

    def __eq__(self, other):
        return (isinstance(other, SparseMarker)
                and (self.kind, self.label, self.space)
                == (other.kind, other.label, other.space)
                and np.array_equal(self.coords, other.coords))


@dataclass
class AnnotationSet:
    """All annotations attached to one recording (possibly empty)."""

    contours: list = field(default_factory=list)
    meshes: list = field(default_factory=list)
    markers: list = field(default_factory=list)

    @property
    def is_empty(self) -> bool:
        return not (self.contours or self.meshes or self.markers)

    def __eq__(self, other):
        return (isinstance(other, AnnotationSet)
                and self.contours == other.contours
                and self.meshes == other.meshes
                and self.markers == other.markers)


# ---------------------------------------------------------------------------
# polygons and rasterization


def _close(verts: np.ndarray) -> np.ndarray:
    verts = np.asarray(verts, float).reshape(-1, 2)
    if verts.shape[0] > 1 and np.array_equal(verts[0], verts[-1]):
        verts = verts[:-1]
    return verts


def _segments_properly_cross(p1, p2, q1, q2) -> bool:
    def ccw(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    d1, d2 = ccw(q1, q2, p1), ccw(q1, q2, p2)
    d3, d4 = ccw(p1, p2, q1), ccw(p1, p2, q2)
    return ((d1 > 0) != (d2 > 0) and (d3 > 0) != (d4 > 0)
            and d1 != 0 and d2 != 0 and d3 != 0 and d4 != 0)


def polygon_is_simple(verts: np.ndarray) -> bool:
    """True when no two non-adjacent closed-polygon edges properly cross."""
    v = _close(verts)
    n = v.shape[0]
    edges = [(v[i], v[(i + 1) % n]) for i in range(n)]
    for i in range(n):
        for j in range(i + 1, n):
            if j == i + 1 or (i == 0 and j == n - 1):
                continue  # adjacent edges share a vertex
            if _segments_properly_cross(*edges[i], *edges[j]):
                return False
    return True


def points_in_polygon(px, pz, verts) -> np.ndarray:
    """Even-odd crossing test for arrays of points (half-open edge rule)."""
    v = _close(verts)
    px = np.asarray(px, float)
    pz = np.asarray(pz, float)
    inside = np.zeros(px.shape, bool)
    x1, z1 = v[:, 0], v[:, 1]
    x2, z2 = np.roll(x1, -1), np.roll(z1, -1)
    for k in range(v.shape[0]):
        if z1[k] == z2[k]:
            continue
        crosses = (z1[k] <= pz) != (z2[k] <= pz)
        xc = x1[k] + (pz - z1[k]) * (x2[k] - x1[k]) / (z2[k] - z1[k])
        inside ^= crosses & (px < xc)
    return inside


def rasterize_contours(endo, epi, grid: CartesianGrid2D) -> np.ndarray:
    """Rasterize contours to a label mask: 2 inside endo (cavity), 1 between
    endo and epi (myocardium), 0 elsewhere. epi may be None.

    Pixel centers are classified with the even-odd rule; the epicardial
    contour must enclose every endocardial vertex.
    """
    endo = _close(endo)
    if not polygon_is_simple(endo):
        raise ValidationError("self-intersecting contour (endo)")
    if epi is not None:
        epi = _close(epi)
        if not polygon_is_simple(epi):
            raise ValidationError("self-intersecting contour (epi)")
        if not np.all(points_in_polygon(endo[:, 0], endo[:, 1], epi)):
            raise ValidationError("epi contour does not enclose endo contour")
    x, z = grid.pixel_centers()
    labels = np.zeros((grid.height, grid.width), np.uint8)
    if epi is not None:
        labels[points_in_polygon(x, z, epi)] = 1
    labels[points_in_polygon(x, z, endo)] = 2
    return labels


# ---------------------------------------------------------------------------
# strain


def polyline_length(verts: np.ndarray) -> float:
    """Arc length of an open polyline (meters)."""
    v = np.asarray(verts, float).reshape(-1, 2)
    return float(np.sum(np.linalg.norm(np.diff(v, axis=0), axis=1)))


def strain_curve(contour: Contour2D, reference_frame: int = 0) -> np.ndarray:
    """Percent arc-length change of the contour relative to a reference frame.

    Requires point-corresponded contours (same vertex count every frame).
    """
    counts = {f.shape[0] for f in contour.frames}
    if len(counts) != 1:
        raise ValidationError("vertex count differs across frames")
    lengths = np.array([polyline_length(f) for f in contour.frames])
    ref = lengths[reference_frame]
    if ref == 0:
        raise ValidationError("reference contour has zero length")
    return 100.0 * (lengths - ref) / ref


def segmental_strain(contour: Contour2D, n_segments: int = 6,
                     reference_frame: int = 0) -> np.ndarray:
    """Per-segment strain (T, n_segments) with segments cut at equal arc
    length on the reference frame and tracked as material points."""
    counts = {f.shape[0] for f in contour.frames}
    if len(counts) != 1:
        raise ValidationError("vertex count differs across frames")

    def cumlen(v):
        return np.concatenate(([0.0], np.cumsum(np.linalg.norm(np.diff(v, axis=0), axis=1))))

    ref = contour.frames[reference_frame]
    cl_ref = cumlen(ref)
    total = cl_ref[-1]
    if total == 0:
        raise ValidationError("reference contour has zero length")
    bounds = np.linspace(0.0, total, n_segments + 1)
    # material parameters of the boundaries: edge index + fraction along it
    e = np.clip(np.searchsorted(cl_ref, bounds, side="right") - 1, 0, cl_ref.size - 2)
    seg = cl_ref[e + 1] - cl_ref[e]
    frac = np.where(seg > 0, (bounds - cl_ref[e]) / np.where(seg > 0, seg, 1.0), 0.0)

    out = np.empty((len(contour.frames), n_segments))
    for t, v in enumerate(contour.frames):
        cl = cumlen(v)
        at = cl[e] + frac * (cl[e + 1] - cl[e])
        out[t] = np.diff(at)
    ref_seg = out[reference_frame]
    return 100.0 * (out - ref_seg) / ref_seg


# ---------------------------------------------------------------------------
# meshes


def _check_closed(triangles: np.ndarray):
    tri = np.asarray(triangles, np.int64)
    if tri.size == 0:
        raise ValidationError("open mesh: no triangles")
    directed = {}
    for a, b, c in tri:
        for e in ((a, b), (b, c), (c, a)):
            if e in directed:
                raise ValidationError("inconsistent winding or non-manifold edge")
            directed[e] = True
    for a, b in directed:
        if (b, a) not in directed:
            raise ValidationError("open mesh: boundary edge found")


class MeshVolume(NamedTuple):
    volume_ml: float
    outward_winding: bool


def mesh_volume(mesh: MeshFrame) -> MeshVolume:
    """Cavity volume of a closed mesh by the divergence theorem.

    Sum of signed tetrahedron volumes det(v0, v1, v2)/6 against the origin;
    returns |volume| in milliliters plus whether the winding was outward
    (positive signed volume).
    """
    _check_closed(mesh.triangles)
    v = mesh.vertices
    t = mesh.triangles.astype(np.int64)
    p0, p1, p2 = v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]
    signed = float(np.sum(np.einsum("ij,ij->i", p0, np.cross(p1, p2))) / 6.0)
    return MeshVolume(abs(signed) * ML_PER_M3, signed > 0)


def voxelize_mesh(mesh: MeshFrame, grid: CartesianGrid3D) -> np.ndarray:
    """Binary volume of voxel centers inside the closed mesh.

    Parity of surface crossings along +z rays through each (x, y) voxel
    column; triangles degenerate in the (x, y) projection (parallel to the
    ray) contribute no crossings. Output is indexed [y, z, x] like
    CartesianGrid3D volumes.
    """
    _check_closed(mesh.triangles)
    v = mesh.vertices
    ox, oy, oz = grid.origin
    sp = grid.spacing
    half = 0.5 * sp
    lo = np.array([ox - half, oy - half, oz - half])
    hi = np.array([ox + (grid.width - 0.5) * sp,
                   oy + (grid.depth - 0.5) * sp,
                   oz + (grid.height - 0.5) * sp])
    vmin, vmax = v.min(axis=0), v.max(axis=0)
    if (vmin[0] < lo[0] or vmin[1] < lo[1] or vmin[2] < lo[2]
            or vmax[0] > hi[0] or vmax[1] > hi[1] or vmax[2] > hi[2]):
        raise ValidationError("mesh exceeds grid bounds")

    xs = ox + sp * np.arange(grid.width)
    ys = oy + sp * np.arange(grid.depth)
    zs = oz + sp * np.arange(grid.height)
    col_x = np.broadcast_to(xs[None, :], (grid.depth, grid.width))
    col_y = np.broadcast_to(ys[:, None], (grid.depth, grid.width))

    hits_col: list[np.ndarray] = []
    hits_z: list[np.ndarray] = []
    t = mesh.triangles.astype(np.int64)
    for a, b, c in t:
        p, q, r = v[a], v[b], v[c]
        # 2D projection onto (x, y); skip ray-parallel triangles
        area2 = (q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0])
        if area2 == 0.0:
            continue
        x0, x1 = min(p[0], q[0], r[0]), max(p[0], q[0], r[0])
        y0, y1 = min(p[1], q[1], r[1]), max(p[1], q[1], r[1])
        jx = np.flatnonzero((xs >= x0) & (xs <= x1))
        jy = np.flatnonzero((ys >= y0) & (ys <= y1))
        if jx.size == 0 or jy.size == 0:
            continue
        gx = col_x[np.ix_(jy, jx)]
        gy = col_y[np.ix_(jy, jx)]
        inside = _tri_contains(p, q, r, gx, gy)
        if not inside.any():
            continue
        # plane z at the contained columns
        n = np.cross(q - p, r - p)
        zc = p[2] - ((gx[inside] - p[0]) * n[0] + (gy[inside] - p[1]) * n[1]) / n[2]
        iy, ix = np.nonzero(inside)
        hits_col.append((jy[iy] * grid.width + jx[ix]).astype(np.int64))
        hits_z.append(zc)

    out = np.zeros((grid.depth, grid.height, grid.width), np.uint8)
    if not hits_col:
        return out
    cols = np.concatenate(hits_col)
    zhit = np.concatenate(hits_z)
    order = np.lexsort((zhit, cols))
    cols, zhit = cols[order], zhit[order]
    starts = np.flatnonzero(np.r_[True, cols[1:] != cols[:-1]])
    ends = np.r_[starts[1:], cols.size]
    for s, e in zip(starts, ends):
        col = cols[s]
        iy, ix = divmod(int(col), grid.width)
        crossings = zhit[s:e]
        parity = np.searchsorted(crossings, zs, side="right") % 2
        out[iy, :, ix] = parity.astype(np.uint8)
    return out


def _tri_contains(p, q, r, gx, gy):
    """Even-odd point-in-triangle on the (x, y) projection (half-open rule)."""
    inside = np.zeros(gx.shape, bool)
    verts = ((p[0], p[1]), (q[0], q[1]), (r[0], r[1]))
    for k in range(3):
        (xa, ya), (xb, yb) = verts[k], verts[(k + 1) % 3]
        if ya == yb:
            continue
        crosses = (ya <= gy) != (yb <= gy)
        xc = xa + (gy - ya) * (xb - xa) / (yb - ya)
        inside ^= crosses & (gx < xc)
    return inside


@dataclass(frozen=True)
class VolumeCurve:
    """Per-frame cavity volume with end-diastole/end-systole frame picks."""

    times: np.ndarray
    volumes_ml: np.ndarray
    ed_frames: tuple
    es_frames: tuple


def volume_curve(mesh: Mesh3D, times=None, peaks: RPeakList | None = None) -> VolumeCurve:
    """Volume-time curve of a mesh sequence.

    ED is the largest and ES the smallest volume, picked inside each beat
    when peaks are given and globally otherwise; ties break to the earliest
    frame.
    """
    n = len(mesh.frames)
    if n < 2:
        raise ValidationError("volume_curve needs at least 2 frames")
    times = np.arange(n, dtype=float) if times is None else np.asarray(times, float)
    if times.size != n:
        raise ValidationError("times length must match frame count")
    vols = np.array([mesh_volume(f).volume_ml for f in mesh.frames])

    if peaks is None or len(peaks) < 2:
        groups = [np.arange(n)]
    else:
        ph = phase_groups = np.searchsorted(peaks.times, times, side="right") - 1
        ok = (ph >= 0) & (ph <= len(peaks) - 2)
        groups = [np.flatnonzero(ok & (phase_groups == k))
                  for k in np.unique(phase_groups[ok])]
        groups = [g for g in groups if g.size]
        if not groups:
            groups = [np.arange(n)]
    ed = tuple(int(g[np.argmax(vols[g])]) for g in groups)
    es = tuple(int(g[np.argmin(vols[g])]) for g in groups)
    return VolumeCurve(times, vols, ed, es)
