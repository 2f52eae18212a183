import numpy as np
import pytest

from conftest import random_recording
from echokit import container
from echokit.container import (ExamManifest, Recording, ecg_stream, header_size,
                               make_stream, read_exam, read_recording,
                               read_stream_blob, validate_recording, write_exam,
                               write_recording, write_stream_blob)
from echokit.errors import ValidationError
from echokit.timing import EcgTrace


def small_recording():
    rng = np.random.default_rng(0)
    bmode = make_stream("bmode2d", rng.random((3, 4, 5)).astype(np.float32),
                        [0.0, 0.1, 0.2], geometry_id=0)
    tdi = make_stream("tdi2d", rng.random((2, 4, 5)).astype(np.float32),
                      [0.05, 0.15], nyquist_velocity=0.16, geometry_id=0)
    ecg = ecg_stream(EcgTrace(rng.standard_normal(700), 600.0))
    from conftest import random_geometry

    return Recording("r1", (bmode, tdi, ecg), {0: random_geometry(rng)})


def test_round_trip_identity(tmp_path):
    rec = small_recording()
    write_recording(rec, tmp_path / "r")
    assert read_recording(tmp_path / "r") == rec


def test_round_trip_random_recordings(tmp_path):
    rng = np.random.default_rng(42)
    for i in range(40):
        rec = random_recording(rng)
        d = tmp_path / f"r{i}"
        write_recording(rec, d)
        assert read_recording(d) == rec


def test_write_is_deterministic(tmp_path):
    rec = small_recording()
    write_recording(rec, tmp_path / "a")
    write_recording(rec, tmp_path / "b")
    files_a = sorted(p.name for p in (tmp_path / "a").iterdir())
    files_b = sorted(p.name for p in (tmp_path / "b").iterdir())
    assert files_a == files_b
    for name in files_a:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_empty_recording_rejected(tmp_path):
    rec = Recording("empty", ())
    with pytest.raises(ValidationError, match="empty recording"):
        write_recording(rec, tmp_path / "r")


def test_blob_size_equals_header_plus_payload(tmp_path, phantom_exam):
    manifest, recordings, _ = phantom_exam
    write_exam(manifest, recordings, tmp_path / "exam")
    checked = 0
    for blob in (tmp_path / "exam").rglob("*.exfl"):
        stream = read_stream_blob(blob)
        h = stream.header
        expected = header_size(len(h.shape), h.timestamps.size) + h.payload_bytes
        assert blob.stat().st_size == expected
        checked += 1
    assert checked > 5


def test_bad_magic(tmp_path):
    rec = small_recording()
    write_recording(rec, tmp_path / "r")
    blob = next((tmp_path / "r").glob("*.exfl"))
    raw = bytearray(blob.read_bytes())
    raw[:4] = b"XXXX"
    blob.write_bytes(bytes(raw))
    with pytest.raises(ValidationError, match="bad magic"):
        read_recording(tmp_path / "r")


def test_version_mismatch(tmp_path):
    rec = small_recording()
    write_recording(rec, tmp_path / "r")
    blob = next((tmp_path / "r").glob("*.exfl"))
    raw = bytearray(blob.read_bytes())
    raw[4] = 9
    blob.write_bytes(bytes(raw))
    with pytest.raises(ValidationError, match="version mismatch"):
        read_recording(tmp_path / "r")


def test_truncated_payload(tmp_path):
    rec = small_recording()
    write_recording(rec, tmp_path / "r")
    blob = next((tmp_path / "r").glob("*.exfl"))
    blob.write_bytes(blob.read_bytes()[:-1])
    with pytest.raises(ValidationError, match="truncated payload"):
        read_recording(tmp_path / "r")


def test_non_increasing_timestamps_rejected_on_read(tmp_path):
    stream = make_stream("bmode2d", np.zeros((2, 2, 2), np.float32),
                         [0.5, 0.1], geometry_id=None)
    write_stream_blob(stream, tmp_path / "bad.exfl")
    with pytest.raises(ValidationError, match="timestamps not strictly increasing"):
        read_stream_blob(tmp_path / "bad.exfl")


def test_manifest_cross_check(tmp_path):
    rec = small_recording()
    write_recording(rec, tmp_path / "r")
    mpath = tmp_path / "r" / container.MANIFEST_NAME
    text = mpath.read_text().replace('"tdi2d"', '"color2d"')
    mpath.write_text(text)
    with pytest.raises(ValidationError, match="mismatch"):
        read_recording(tmp_path / "r")


def test_validate_doppler_missing_nyquist():
    rec = small_recording()
    bad_header = container.StreamHeader("tdi2d", "f32", (2, 4, 5),
                                        [0.05, 0.15], None, 0)
    bad = container.Stream(bad_header, rec.streams[1].data)
    rec2 = Recording(rec.id, (rec.streams[0], bad, rec.streams[2]), rec.geometries)
    violations = validate_recording(rec2)
    assert any("StreamHeader.nyquist_velocity missing" in v for v in violations)


def test_validate_duplicate_timestamps():
    stream = make_stream("bmode2d", np.zeros((2, 3, 3), np.float32), [0.0, 0.0])
    rng = np.random.default_rng(1)
    rec = Recording("r", (stream, ecg_stream(EcgTrace(rng.standard_normal(700)))))
    violations = validate_recording(rec)
    assert any("timestamps not strictly increasing" in v for v in violations)


def test_validate_missing_geometry():
    stream = make_stream("bmode2d", np.zeros((1, 3, 3), np.float32), [0.0],
                         geometry_id=7)
    rng = np.random.default_rng(1)
    rec = Recording("r", (stream, ecg_stream(EcgTrace(rng.standard_normal(700)))))
    assert any("missing geometry id 7" in v for v in validate_recording(rec))


def test_validate_requires_single_ecg():
    stream = make_stream("bmode2d", np.zeros((1, 3, 3), np.float32), [0.0])
    rec = Recording("r", (stream,))
    assert any("exactly one ECG" in v for v in validate_recording(rec))


def test_valid_phantom_recording_has_no_violations(phantom_exam):
    for rec in phantom_exam.recordings.values():
        assert validate_recording(rec) == []


def test_ecg_round_trip_through_stream():
    rng = np.random.default_rng(3)
    trace = EcgTrace(rng.standard_normal(1200).astype(np.float32), 600.0, 0.25)
    rec = Recording("r", (make_stream("bmode2d", np.zeros((1, 2, 2), np.float32), [0.0]),
                          ecg_stream(trace)))
    ecg = rec.ecg
    assert np.array_equal(ecg.samples, trace.samples.astype(float))
    assert ecg.t0 == 0.25
    assert abs(ecg.rate - 600.0) < 1e-6


def test_exam_round_trip(tmp_path):
    rng = np.random.default_rng(9)
    recs = {f"rec{i}": random_recording(rng) for i in range(3)}
    manifest = ExamManifest("exam-1", sorted(recs), patient_key="p-17", fold=2)
    write_exam(manifest, recs, tmp_path / "exam")
    m2, recs2 = read_exam(tmp_path / "exam")
    assert m2.exam_id == "exam-1" and m2.patient_key == "p-17" and m2.fold == 2
    assert recs2.keys() == recs.keys()
    for k in recs:
        assert recs2[k] == recs[k]


def test_exam_manifest_invariants():
    with pytest.raises(ValidationError, match="nonempty"):
        ExamManifest("e", [])
    with pytest.raises(ValidationError, match="unique"):
        ExamManifest("e", ["a", "a"])
