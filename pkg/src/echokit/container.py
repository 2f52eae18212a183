"""Open on-disk container for exams, recordings, streams, and annotations.

A recording directory holds one little-endian blob per stream plus a JSON
manifest. Stream blob layout (all little-endian, no padding):

    magic    4 bytes  "EXFL" (45 58 46 4C)
    version  u16      currently 1
    modality u8       0..7 in MODALITIES order
    dtype    u8       0 = f32, 1 = u8
    ndim     u8
    dims     u32 * ndim   frame-major (dims[0] = frame count)
    geometry u32      id into the recording's geometry table,
                      0xFFFFFFFF when the stream has no geometry
    nyquist  f64      meters/second; IEEE NaN when absent
    n_ts     u32      one timestamp per frame
    ts       f64 * n_ts   seconds since recording start
    payload  raw samples, row-major, frame-major

Annotation blobs are raw little-endian as well: a contour blob is a u32
frame count followed per frame by a u32 vertex count and f64 (x, z) pairs;
a mesh blob is a u32 frame count followed per frame by u32 nv, f64*3*nv
vertices, u32 nt, u32*3*nt triangle indices. Sparse markers live in the
manifest itself.

Serialization is deterministic: writing the same recording twice produces
byte-identical directories. Recordings are immutable once constructed and
safe to share across workers; writing is single-writer per directory.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .annotations import AnnotationSet, Contour2D, Mesh3D, MeshFrame, SparseMarker
from .errors import ValidationError
from .geometry import SectorGeometry2D, SphericalGeometry3D
from .timing import EcgTrace

MAGIC = b"EXFL"
VERSION = 1
GEOMETRY_NONE = 0xFFFFFFFF

MODALITIES = ("bmode1d", "bmode2d", "bmode3d", "tdi2d", "color2d",
              "pw1d", "cw1d", "ecg")
DOPPLER_MODALITIES = frozenset({"tdi2d", "color2d", "pw1d", "cw1d"})
DTYPES = ("f32", "u8")
_NP_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}

MANIFEST_NAME = "manifest.json"
EXAM_NAME = "exam.json"


def is_doppler(modality: str) -> bool:
    return modality in DOPPLER_MODALITIES


@dataclass(frozen=True)
class StreamHeader:
    """Declared layout and timing of one modality stream."""

    modality: str
    dtype: str
    shape: tuple
    timestamps: np.ndarray
    nyquist_velocity: float | None = None
    geometry_id: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(d) for d in self.shape))
        object.__setattr__(self, "timestamps", np.asarray(self.timestamps, float))

    @property
    def n_frames(self) -> int:
        return self.shape[0] if self.shape else 0

    @property
    def payload_bytes(self) -> int:
        return int(np.prod(self.shape)) * _NP_DTYPES[self.dtype].itemsize

    def fps(self) -> float:
        """Mean frame rate from the declared timestamps."""
        ts = self.timestamps
        if ts.size < 2:
            raise ValidationError("fps needs at least 2 timestamps")
        return float((ts.size - 1) / (ts[-1] - ts[0]))

    def __eq__(self, other):
        return (isinstance(other, StreamHeader)
                and self.modality == other.modality
                and self.dtype == other.dtype
                and self.shape == other.shape
                and np.array_equal(self.timestamps, other.timestamps)
                and _none_eq(self.nyquist_velocity, other.nyquist_velocity)
                and self.geometry_id == other.geometry_id)


def _none_eq(a, b):
    if a is None or b is None:
        return a is None and b is None
    return a == b


@dataclass(frozen=True)
class Stream:
    """Header plus payload array (dtype must match the declared one)."""

    header: StreamHeader
    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "data", np.ascontiguousarray(self.data))

    @property
    def modality(self) -> str:
        return self.header.modality

    def __eq__(self, other):
        return (isinstance(other, Stream) and self.header == other.header
                and np.array_equal(self.data, other.data))


def make_stream(modality: str, data, timestamps, *, nyquist_velocity=None,
                geometry_id=None) -> Stream:
    """Build a stream, casting data to the format dtype (f32, or u8 if the
    array already is u8)."""
    arr = np.asarray(data)
    dtype = "u8" if arr.dtype == np.uint8 else "f32"
    arr = np.ascontiguousarray(arr, _NP_DTYPES[dtype])
    header = StreamHeader(modality, dtype, arr.shape, np.asarray(timestamps, float),
                          nyquist_velocity, geometry_id)
    return Stream(header, arr)


def ecg_stream(trace: EcgTrace) -> Stream:
    """Serialize an ECG trace as a stream (one timestamp per sample)."""
    return make_stream("ecg", np.asarray(trace.samples, np.float32), trace.times)


@dataclass(frozen=True)
class Recording:
    """One acquisition: a set of streams (exactly one of them ECG), the
    geometry table they reference, and any attached annotations."""

    id: str
    streams: tuple
    geometries: dict = field(default_factory=dict)
    annotations: AnnotationSet = field(default_factory=AnnotationSet)

    def __post_init__(self):
        object.__setattr__(self, "streams", tuple(self.streams))
        object.__setattr__(self, "geometries", dict(self.geometries))

    @property
    def ecg(self) -> EcgTrace:
        """The co-acquired ECG, derived from the single ecg-modality stream."""
        stream = self.stream_of("ecg")
        ts = stream.header.timestamps
        rate = (ts.size - 1) / (ts[-1] - ts[0]) if ts.size > 1 else 1.0
        return EcgTrace(stream.data.astype(float), float(rate), float(ts[0]))

    def streams_of(self, modality: str) -> list[Stream]:
        return [s for s in self.streams if s.modality == modality]

    def stream_of(self, modality: str) -> Stream:
        found = self.streams_of(modality)
        if len(found) != 1:
            raise ValidationError(
                f"expected exactly one {modality} stream, found {len(found)}")
        return found[0]

    def geometry_of(self, stream: Stream):
        gid = stream.header.geometry_id
        if gid is None:
            raise ValidationError(f"stream {stream.modality} has no geometry")
        return self.geometries[gid]

    def __eq__(self, other):
        return (isinstance(other, Recording)
                and self.id == other.id
                and self.streams == other.streams
                and self.geometries == other.geometries
                and self.annotations == other.annotations)


@dataclass
class ExamManifest:
    """Exam-level bookkeeping: which recordings belong together and the
    opaque patient key used for grouped fold assignment."""

    exam_id: str
    recording_ids: list
    patient_key: str = ""
    fold: int | None = None

    def __post_init__(self):
        bad = []
        if not self.recording_ids:
            bad.append("ExamManifest.recording_ids must be nonempty")
        if len(set(self.recording_ids)) != len(self.recording_ids):
            bad.append("ExamManifest.recording_ids must be unique")
        if self.fold is not None and self.fold < 0:
            bad.append("ExamManifest.fold must be >= 0 or None")
        if bad:
            raise ValidationError(bad)


# ---------------------------------------------------------------------------
# validation


def validate_recording(rec: Recording) -> list[str]:
    """Collect every invariant violation (empty list when the recording is
    valid). Violations name the type, field, and broken rule."""
    v: list[str] = []
    if not rec.id:
        v.append("Recording.id empty")
    if not rec.streams:
        v.append("Recording.streams empty recording")
        return v
    n_ecg = sum(1 for s in rec.streams if s.modality == "ecg")
    if n_ecg != 1:
        v.append(f"Recording.streams expected exactly one ECG stream, found {n_ecg}")
    for i, s in enumerate(rec.streams):
        h = s.header
        tag = f"(stream {i}, {h.modality})"
        if h.modality not in MODALITIES:
            v.append(f"StreamHeader.modality unknown {tag}")
            continue
        if h.dtype not in DTYPES:
            v.append(f"StreamHeader.dtype unknown {tag}")
            continue
        if len(h.shape) < 1 or any(d < 1 for d in h.shape):
            v.append(f"StreamHeader.shape dimensions must be >= 1 {tag}")
        if h.timestamps.ndim != 1 or h.shape[0] != h.timestamps.size:
            v.append(f"StreamHeader.shape shape[0] != len(timestamps) {tag}")
        if h.timestamps.size > 1 and not np.all(np.diff(h.timestamps) > 0):
            v.append(f"StreamHeader.timestamps not strictly increasing {tag}")
        if is_doppler(h.modality):
            if h.nyquist_velocity is None:
                v.append(f"StreamHeader.nyquist_velocity missing {tag}")
            elif not (h.nyquist_velocity > 0 and math.isfinite(h.nyquist_velocity)):
                v.append(f"StreamHeader.nyquist_velocity must be positive {tag}")
        elif h.nyquist_velocity is not None:
            v.append(f"StreamHeader.nyquist_velocity present on non-Doppler stream {tag}")
        if h.geometry_id is not None and h.geometry_id not in rec.geometries:
            v.append(f"Recording.geometries missing geometry id {h.geometry_id} {tag}")
        if s.data.shape != h.shape:
            v.append(f"Stream.data shape differs from header {tag}")
        if s.data.dtype != _NP_DTYPES[h.dtype]:
            v.append(f"Stream.data dtype differs from header {tag}")
    return v


# ---------------------------------------------------------------------------
# blob encoding


def _encode_stream(stream: Stream) -> bytes:
    h = stream.header
    parts = [MAGIC,
             struct.pack("<H", VERSION),
             struct.pack("<B", MODALITIES.index(h.modality)),
             struct.pack("<B", DTYPES.index(h.dtype)),
             struct.pack("<B", len(h.shape)),
             struct.pack(f"<{len(h.shape)}I", *h.shape),
             struct.pack("<I", GEOMETRY_NONE if h.geometry_id is None else h.geometry_id),
             struct.pack("<d", math.nan if h.nyquist_velocity is None else h.nyquist_velocity),
             struct.pack("<I", h.timestamps.size),
             h.timestamps.astype("<f8").tobytes(),
             np.ascontiguousarray(stream.data, _NP_DTYPES[h.dtype]).tobytes()]
    return b"".join(parts)


def header_size(ndim: int, n_timestamps: int) -> int:
    """Byte size of a blob header; file size = header + payload, exactly."""
    return 4 + 2 + 1 + 1 + 1 + 4 * ndim + 4 + 8 + 4 + 8 * n_timestamps


def _decode_stream(raw: bytes, name: str) -> Stream:
    def fail(msg):
        raise ValidationError(f"{name}: {msg}")

    if len(raw) < 9 or raw[:4] != MAGIC:
        fail("bad magic")
    (version,) = struct.unpack_from("<H", raw, 4)
    if version != VERSION:
        fail(f"version mismatch (got {version}, expected {VERSION})")
    mod_code, dtype_code, ndim = struct.unpack_from("<BBB", raw, 6)
    if mod_code >= len(MODALITIES):
        fail(f"unknown modality code {mod_code}")
    if dtype_code >= len(DTYPES):
        fail(f"unknown dtype code {dtype_code}")
    off = 9
    if len(raw) < off + 4 * ndim + 4 + 8 + 4:
        fail("truncated header")
    shape = struct.unpack_from(f"<{ndim}I", raw, off)
    off += 4 * ndim
    (gid,) = struct.unpack_from("<I", raw, off)
    off += 4
    (nyq,) = struct.unpack_from("<d", raw, off)
    off += 8
    (n_ts,) = struct.unpack_from("<I", raw, off)
    off += 4
    if len(raw) < off + 8 * n_ts:
        fail("truncated header")
    ts = np.frombuffer(raw, "<f8", count=n_ts, offset=off).copy()
    off += 8 * n_ts
    dtype = _NP_DTYPES[DTYPES[dtype_code]]
    expected = int(np.prod(shape)) * dtype.itemsize
    if len(raw) - off != expected:
        fail(f"truncated payload (got {len(raw) - off} bytes, expected {expected})")
    data = np.frombuffer(raw, dtype, offset=off).reshape(shape).copy()
    if ts.size > 1 and not np.all(np.diff(ts) > 0):
        fail("timestamps not strictly increasing")
    header = StreamHeader(MODALITIES[mod_code], DTYPES[dtype_code], shape, ts,
                          None if math.isnan(nyq) else float(nyq),
                          None if gid == GEOMETRY_NONE else int(gid))
    return Stream(header, data)


def _encode_contour(contour: Contour2D) -> bytes:
    parts = [struct.pack("<I", len(contour.frames))]
    for f in contour.frames:
        parts.append(struct.pack("<I", f.shape[0]))
        parts.append(np.ascontiguousarray(f, "<f8").tobytes())
    return b"".join(parts)


def _decode_contour(raw: bytes, meta: dict, name: str) -> Contour2D:
    off = 0
    try:
        (n_frames,) = struct.unpack_from("<I", raw, off)
        off += 4
        frames = []
        for _ in range(n_frames):
            (nv,) = struct.unpack_from("<I", raw, off)
            off += 4
            frames.append(np.frombuffer(raw, "<f8", count=2 * nv, offset=off)
                          .reshape(nv, 2).copy())
            off += 16 * nv
    except struct.error:
        raise ValidationError(f"{name}: truncated contour blob") from None
    if off != len(raw):
        raise ValidationError(f"{name}: trailing bytes in contour blob")
    return Contour2D(frames, meta["chamber"], meta["layer"], meta["view"],
                     int(meta.get("first_frame", 0)))


def _encode_mesh(mesh: Mesh3D) -> bytes:
    parts = [struct.pack("<I", len(mesh.frames))]
    for f in mesh.frames:
        parts.append(struct.pack("<I", f.vertices.shape[0]))
        parts.append(np.ascontiguousarray(f.vertices, "<f8").tobytes())
        parts.append(struct.pack("<I", f.triangles.shape[0]))
        parts.append(np.ascontiguousarray(f.triangles, "<u4").tobytes())
    return b"".join(parts)


def _decode_mesh(raw: bytes, meta: dict, name: str) -> Mesh3D:
    off = 0
    try:
        (n_frames,) = struct.unpack_from("<I", raw, off)
        off += 4
        frames = []
        for _ in range(n_frames):
            (nv,) = struct.unpack_from("<I", raw, off)
            off += 4
            verts = np.frombuffer(raw, "<f8", count=3 * nv, offset=off).reshape(nv, 3).copy()
            off += 24 * nv
            (nt,) = struct.unpack_from("<I", raw, off)
            off += 4
            tris = np.frombuffer(raw, "<u4", count=3 * nt, offset=off).reshape(nt, 3).copy()
            off += 12 * nt
            frames.append(MeshFrame(verts, tris))
    except (struct.error, ValueError):
        raise ValidationError(f"{name}: truncated mesh blob") from None
    if off != len(raw):
        raise ValidationError(f"{name}: trailing bytes in mesh blob")
    return Mesh3D(frames, int(meta.get("first_frame", 0)))


def write_stream_blob(stream: Stream, path) -> None:
    """Write a single stream blob outside a recording (truth/prediction files)."""
    Path(path).write_bytes(_encode_stream(stream))


def read_stream_blob(path) -> Stream:
    """Read a single stream blob written by write_stream_blob."""
    path = Path(path)
    return _decode_stream(path.read_bytes(), path.name)


# ---------------------------------------------------------------------------
# geometry table (manifest JSON form)


def _geometry_to_json(g):
    if isinstance(g, SphericalGeometry3D):
        return {"kind": "spherical3d", "theta0": g.theta0, "dtheta": g.dtheta,
                "n_beams": g.n_beams, "r0": g.r0, "dr": g.dr,
                "n_samples": g.n_samples, "phi0": g.phi0, "dphi": g.dphi,
                "n_planes": g.n_planes}
    if isinstance(g, SectorGeometry2D):
        return {"kind": "sector2d", "theta0": g.theta0, "dtheta": g.dtheta,
                "n_beams": g.n_beams, "r0": g.r0, "dr": g.dr,
                "n_samples": g.n_samples}
    raise ValidationError(f"unknown geometry type {type(g).__name__}")


def _geometry_from_json(d: dict):
    kind = d.get("kind")
    if kind == "sector2d":
        return SectorGeometry2D(d["theta0"], d["dtheta"], d["n_beams"],
                                d["r0"], d["dr"], d["n_samples"])
    if kind == "spherical3d":
        return SphericalGeometry3D(d["theta0"], d["dtheta"], d["n_beams"],
                                   d["r0"], d["dr"], d["n_samples"],
                                   d["phi0"], d["dphi"], d["n_planes"])
    raise ValidationError(f"unknown geometry kind {kind!r}")


def _header_to_json(h: StreamHeader) -> dict:
    return {"modality": h.modality, "dtype": h.dtype, "shape": list(h.shape),
            "n_frames": h.n_frames, "geometry_id": h.geometry_id,
            "nyquist_velocity": h.nyquist_velocity}


def _dump_json(obj) -> bytes:
    return (json.dumps(obj, sort_keys=True, indent=2) + "\n").encode("utf-8")


# ---------------------------------------------------------------------------
# recording read/write


def _stream_filename(i: int, modality: str) -> str:
    return f"stream{i:03d}_{modality}.exfl"


def write_recording(rec: Recording, path, *, exam_id=None, patient_key=None,
                    fold=None) -> None:
    """Write a recording directory (stream blobs + manifest.json).

    Validates first and reports every violated invariant. The optional exam
    fields are recorded in the manifest for standalone directories.
    """
    violations = validate_recording(rec)
    if violations:
        raise ValidationError(violations)
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)

    manifest = {"format": "exfl-recording", "version": VERSION,
                "recording_id": rec.id, "exam_id": exam_id,
                "patient_key": patient_key, "fold": fold,
                "streams": [], "geometries": {}, "annotations": {}}
    for i, stream in enumerate(rec.streams):
        fname = _stream_filename(i, stream.modality)
        (path / fname).write_bytes(_encode_stream(stream))
        entry = _header_to_json(stream.header)
        entry["file"] = fname
        manifest["streams"].append(entry)
    for gid in sorted(rec.geometries):
        manifest["geometries"][str(gid)] = _geometry_to_json(rec.geometries[gid])

    ann = rec.annotations
    contours, meshes, markers = [], [], []
    for i, c in enumerate(ann.contours):
        fname = f"contour{i:03d}.bin"
        (path / fname).write_bytes(_encode_contour(c))
        contours.append({"file": fname, "chamber": c.chamber, "layer": c.layer,
                         "view": c.view, "first_frame": c.first_frame})
    for i, m in enumerate(ann.meshes):
        fname = f"mesh{i:03d}.bin"
        (path / fname).write_bytes(_encode_mesh(m))
        meshes.append({"file": fname, "first_frame": m.first_frame})
    for m in ann.markers:
        markers.append({"kind": m.kind, "label": m.label, "space": m.space,
                        "coords": m.coords.tolist()})
    manifest["annotations"] = {"contours": contours, "meshes": meshes,
                               "markers": markers}
    (path / MANIFEST_NAME).write_bytes(_dump_json(manifest))


def read_recording(path) -> Recording:
    """Read and validate a recording directory written by write_recording."""
    path = Path(path)
    mpath = path / MANIFEST_NAME
    if not mpath.is_file():
        raise ValidationError(f"{path}: missing {MANIFEST_NAME}")
    manifest = json.loads(mpath.read_text("utf-8"))
    if manifest.get("format") != "exfl-recording":
        raise ValidationError(f"{mpath}: not a recording manifest")

    streams = []
    for entry in manifest["streams"]:
        fname = entry["file"]
        stream = _decode_stream((path / fname).read_bytes(), fname)
        declared = {"modality": stream.header.modality,
                    "dtype": stream.header.dtype,
                    "shape": list(stream.header.shape),
                    "geometry_id": stream.header.geometry_id,
                    "nyquist_velocity": stream.header.nyquist_velocity}
        for key, val in declared.items():
            if entry.get(key) != val:
                raise ValidationError(
                    f"{fname}: manifest/blob header mismatch on {key}")
        streams.append(stream)

    geometries = {int(k): _geometry_from_json(v)
                  for k, v in manifest.get("geometries", {}).items()}
    ann_meta = manifest.get("annotations", {})
    contours = [_decode_contour((path / e["file"]).read_bytes(), e, e["file"])
                for e in ann_meta.get("contours", [])]
    meshes = [_decode_mesh((path / e["file"]).read_bytes(), e, e["file"])
              for e in ann_meta.get("meshes", [])]
    markers = [SparseMarker(e["kind"], np.asarray(e["coords"], float),
                            e.get("label", ""), e.get("space", "cartesian"))
               for e in ann_meta.get("markers", [])]

    rec = Recording(manifest["recording_id"], tuple(streams), geometries,
                    AnnotationSet(contours, meshes, markers))
    violations = validate_recording(rec)
    if violations:
        raise ValidationError(violations)
    return rec


# ---------------------------------------------------------------------------
# exam read/write


def write_exam(manifest: ExamManifest, recordings: dict, root) -> None:
    """Write an exam directory: exam.json plus one subdirectory per recording."""
    missing = [r for r in manifest.recording_ids if r not in recordings]
    if missing:
        raise ValidationError(f"recordings missing for ids {missing}")
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    doc = {"format": "exfl-exam", "version": VERSION,
           "exam_id": manifest.exam_id, "patient_key": manifest.patient_key,
           "fold": manifest.fold, "recording_ids": list(manifest.recording_ids)}
    (root / EXAM_NAME).write_bytes(_dump_json(doc))
    for rid in manifest.recording_ids:
        if not all(c.isalnum() or c in "._-" for c in rid):
            raise ValidationError(f"recording id {rid!r} is not filesystem-safe")
        write_recording(recordings[rid], root / rid, exam_id=manifest.exam_id,
                        patient_key=manifest.patient_key, fold=manifest.fold)


def read_exam(root) -> tuple[ExamManifest, dict]:
    """Read an exam directory back into (manifest, {recording_id: Recording})."""
    root = Path(root)
    epath = root / EXAM_NAME
    if not epath.is_file():
        raise ValidationError(f"{root}: missing {EXAM_NAME}")
    doc = json.loads(epath.read_text("utf-8"))
    if doc.get("format") != "exfl-exam":
        raise ValidationError(f"{epath}: not an exam manifest")
    manifest = ExamManifest(doc["exam_id"], list(doc["recording_ids"]),
                            doc.get("patient_key") or "", doc.get("fold"))
    recordings = {rid: read_recording(root / rid) for rid in manifest.recording_ids}
    return manifest, recordings
