"""Command-line entry point.

Subcommands: inspect, convert, align, stitch, rasterize, evaluate, phantom,
baseline, folds. Exit codes: 0 success, 2 usage error, 3 data/validation
error, 4 refusal (arrhythmia gate, beamspace-domain scoring).

All outputs are deterministic for a fixed seed; files are written
atomically (temp + rename) so parallel runs never interleave partial
files. CSV schemas are documented in docs/cli.md.
"""

from __future__ import annotations

import argparse
import csv
import io
import os
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import container, pipeline
from .annotations import rasterize_contours
from .errors import EchoKitError, RefusalError, ValidationError
from .geometry import (SphericalGeometry3D, convert_series, default_grid_for,
                       scan_convert_3d, default_grid3_for)
from .metrics import (MetricReport, CaseResult, aggregate_folds, filter_recording,
                      make_patient_folds)
from .phantom import PhantomConfig, generate_exam
from .timing import SubAcquisition, detect_r_peaks, pair_interleaved, phase_of, \
    rr_regularity, stitch_multibeat

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_REFUSED = 4

OUT_DIR_ENV = "ECHOKIT_OUT_DIR"


def _atomic_write_bytes(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_csv(path: Path, header, rows) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow(["" if v is None else (repr(v) if isinstance(v, float) else v)
                         for v in row])
    _atomic_write_bytes(path, buf.getvalue().encode("utf-8"))


def write_pgm(path: Path, image: np.ndarray, lo: float | None = None,
              hi: float | None = None) -> None:
    """8-bit binary PGM plus a sidecar .txt recording the value range."""
    img = np.asarray(image, float)
    lo = float(img.min()) if lo is None else lo
    hi = float(img.max()) if hi is None else hi
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    data = np.clip(np.rint((img - lo) * scale), 0, 255).astype(np.uint8)
    head = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii")
    _atomic_write_bytes(path, head + data.tobytes())
    _atomic_write_bytes(Path(str(path) + ".txt"),
                        f"min {lo!r}\nmax {hi!r}\n".encode("ascii"))


def _out_dir(args) -> Path:
    if args.output:
        return Path(args.output)
    env = os.environ.get(OUT_DIR_ENV)
    if env:
        return Path(env)
    raise ValidationError("no output directory (-o or $" + OUT_DIR_ENV + ")")


def _find_recordings(path: Path):
    """Yield (case_id, recording_dir, fold) under an exam/recording tree."""
    if (path / container.MANIFEST_NAME).is_file():
        yield path.name, path, None
        return
    if (path / container.EXAM_NAME).is_file():
        manifest, _ = _read_exam_header(path)
        for rid in manifest.recording_ids:
            yield f"{manifest.exam_id}/{rid}", path / rid, manifest.fold
        return
    found = False
    for sub in sorted(p for p in path.iterdir() if p.is_dir()):
        if (sub / container.EXAM_NAME).is_file() or (sub / container.MANIFEST_NAME).is_file():
            found = True
            yield from _find_recordings(sub)
    if not found:
        raise ValidationError(f"{path}: no recordings or exams found")


def _read_exam_header(path: Path):
    import json

    doc = json.loads((path / container.EXAM_NAME).read_text("utf-8"))
    manifest = container.ExamManifest(doc["exam_id"], list(doc["recording_ids"]),
                                      doc.get("patient_key") or "", doc.get("fold"))
    return manifest, doc


# ---------------------------------------------------------------------------
# subcommands


def _cmd_inspect(args) -> int:
    for case_id, rec_dir, _ in _find_recordings(Path(args.input)):
        rec = container.read_recording(rec_dir)
        print(f"recording {case_id}")
        for s in rec.streams:
            h = s.header
            rate = f"{h.fps():.2f} Hz" if h.n_frames > 1 else "-"
            nyq = f"{h.nyquist_velocity:g} m/s" if h.nyquist_velocity else "-"
            print(f"  {h.modality:8s} frames={h.n_frames:<5d} shape={h.shape} "
                  f"rate={rate} nyquist={nyq} geometry={h.geometry_id}")
        ann = rec.annotations
        if not ann.is_empty:
            print(f"  annotations: {len(ann.contours)} contours, "
                  f"{len(ann.meshes)} meshes, {len(ann.markers)} markers")
    return EXIT_OK


def _convert_one(rec, case_id, out_root: Path, grid_size: int) -> None:
    for s in rec.streams:
        if s.modality in ("bmode2d", "tdi2d", "color2d"):
            geom = rec.geometry_of(s)
            grid = default_grid_for(geom, grid_size)
            data = s.data.astype(float)
            if data.ndim == 4:
                data = data[:, 0]  # velocity channel of color streams
            imgs, mask = convert_series(data, geom, grid)
            d = out_root / case_id.replace("/", "_") / s.modality
            lo, hi = float(imgs.min()), float(imgs.max())
            for t in range(imgs.shape[0]):
                write_pgm(d / f"frame{t:04d}.pgm", imgs[t], lo, hi)
            write_pgm(d / "mask.pgm", mask.astype(float), 0.0, 1.0)
        elif s.modality == "bmode3d":
            geom = rec.geometry_of(s)
            if not isinstance(geom, SphericalGeometry3D):
                continue
            grid = default_grid3_for(geom, grid_size // 2)
            vol, mask = scan_convert_3d(s.data[0].astype(float), geom, grid)
            d = out_root / case_id.replace("/", "_") / s.modality
            mid = vol.shape[0] // 2
            write_pgm(d / "frame0000_midplane.pgm", vol[mid])
            write_pgm(d / "mask_midplane.pgm", mask[mid].astype(float), 0.0, 1.0)


def _cmd_convert(args) -> int:
    out = _out_dir(args)
    cases = list(_find_recordings(Path(args.input)))
    jobs = max(1, args.jobs)

    def work(item):
        case_id, rec_dir, _ = item
        _convert_one(container.read_recording(rec_dir), case_id, out, args.grid)

    if jobs == 1:
        for item in cases:
            work(item)
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(work, cases))
    return EXIT_OK


def _cmd_align(args) -> int:
    out = _out_dir(args)
    for case_id, rec_dir, _ in _find_recordings(Path(args.input)):
        rec = container.read_recording(rec_dir)
        peaks = detect_r_peaks(rec.ecg)
        base = out / case_id.replace("/", "_")
        _write_csv(base / "rpeaks.csv", ["time_s"],
                   [[float(t)] for t in peaks.times])
        for s in rec.streams:
            if s.modality == "ecg":
                continue
            ts = s.header.timestamps
            ph = (phase_of(ts, peaks) if len(peaks) >= 2
                  else np.full(ts.size, np.nan))
            _write_csv(base / f"phases_{s.modality}.csv",
                       ["frame", "time_s", "phase"],
                       [[t, float(ts[t]), None if np.isnan(ph[t]) else float(ph[t])]
                        for t in range(ts.size)])
        bmodes = rec.streams_of("bmode2d")
        dopplers = rec.streams_of("tdi2d") + rec.streams_of("color2d")
        if bmodes and dopplers:
            pairing = pair_interleaved(bmodes[0].header.timestamps,
                                       dopplers[0].header.timestamps,
                                       args.slack)
            _write_csv(base / f"pairing_bmode2d_{dopplers[0].modality}.csv",
                       ["b_frame", "a_frame", "dt_s"],
                       [[j, None if pairing.a_index[j] < 0 else int(pairing.a_index[j]),
                         float(pairing.dt[j])]
                        for j in range(pairing.a_index.size)])
    return EXIT_OK


def _cmd_stitch(args) -> int:
    out = _out_dir(args)
    rec = container.read_recording(Path(args.input))
    gated = rec.streams_of("bmode3d")
    if len(gated) < 1:
        raise ValidationError("stitch needs bmode3d sub-acquisition streams")
    peaks = detect_r_peaks(rec.ecg)
    geoms = [rec.geometry_of(s) for s in gated]
    dtheta = geoms[0].dtheta
    theta_min = min(g.theta0 for g in geoms)
    subacqs = []
    for s, g in zip(gated, geoms):
        if abs(g.dtheta - dtheta) > 1e-12:
            raise ValidationError("sub-acquisitions disagree on beam spacing")
        start = int(round((g.theta0 - theta_min) / dtheta))
        subacqs.append(SubAcquisition(s.data.astype(float),
                                      s.header.timestamps, start))
    stitched = stitch_multibeat(subacqs, peaks, args.max_cv)
    ref = geoms[0]
    wide = SphericalGeometry3D(theta_min, dtheta,
                               sum(s.n_beams for s in subacqs),
                               ref.r0, ref.dr, ref.n_samples,
                               ref.phi0, ref.dphi, ref.n_planes)
    out_rec = container.Recording(
        rec.id + "-stitched",
        (container.make_stream("bmode3d", stitched.frames.astype(np.float32),
                               stitched.phases, geometry_id=0),
         rec.stream_of("ecg")),
        {0: wide})
    container.write_recording(out_rec, out)
    print(f"stitched {len(subacqs)} sub-acquisitions -> {out}")
    return EXIT_OK


def _cmd_rasterize(args) -> int:
    out = _out_dir(args)
    for case_id, rec_dir, _ in _find_recordings(Path(args.input)):
        rec = container.read_recording(rec_dir)
        endo = [c for c in rec.annotations.contours if c.layer == "endo"]
        if not endo:
            continue
        epi = [c for c in rec.annotations.contours if c.layer == "epi"]
        bmode = rec.stream_of("bmode2d")
        grid = default_grid_for(rec.geometry_of(bmode), args.grid)
        base = out / case_id.replace("/", "_")
        epi0 = epi[0] if epi else None
        for j, verts in enumerate(endo[0].frames):
            epi_verts = None
            if epi0 is not None and j < len(epi0.frames):
                epi_verts = epi0.frames[j]
            labels = rasterize_contours(verts, epi_verts, grid)
            write_pgm(base / f"labels{j:04d}.pgm", labels.astype(float), 0.0, 2.0)
    return EXIT_OK


def _cmd_phantom(args) -> int:
    out = _out_dir(args)
    cfg = PhantomConfig(seed=args.seed, heart_rate=args.hr, n_beats=args.beats,
                        rr_cv=args.rr_cv, snr_db=args.snr,
                        include_volume=not args.no_volume,
                        n_subacquisitions=args.subacqs)
    exam = generate_exam(cfg)
    container.write_exam(exam.manifest, exam.recordings, out)

    truth_dir = out / "truth"
    truth_dir.mkdir(parents=True, exist_ok=True)
    t = exam.truth
    _write_csv(truth_dir / "rpeaks.csv", ["time_s"],
               [[float(v)] for v in t.r_peak_times])
    blobs = {
        "tissue_tdi_true": ("tdi2d", t.tissue_tdi_true, t.tissue_tdi_times,
                            cfg.nyquist_tissue),
        "tissue_bmode_clean": ("bmode2d", t.tissue_bmode, t.tissue_bmode_times, None),
        "flow_velocity_true": ("color2d", t.flow_velocity_true, t.flow_color_times,
                               cfg.nyquist_flow),
        "flow_power_clean": ("bmode2d", t.flow_power, t.flow_color_times, None),
        "flow_bmode_clean": ("bmode2d", t.flow_bmode, t.flow_bmode_times, None),
    }
    if t.gated_direct is not None:
        blobs["gated_direct"] = ("bmode3d", t.gated_direct,
                                 t.gated_direct_times, None)
    for name, (modality, data, times, nyq) in blobs.items():
        stream = container.make_stream(modality, data.astype(np.float32), times,
                                       nyquist_velocity=nyq)
        container.write_stream_blob(stream, truth_dir / f"{name}.exfl")
    print(f"phantom exam {exam.manifest.exam_id} -> {out}")
    return EXIT_OK


def _cmd_baseline(args) -> int:
    out = _out_dir(args)
    for case_id, rec_dir, _ in _find_recordings(Path(args.input)):
        rec = container.read_recording(rec_dir)
        try:
            case = pipeline.prepare_case(rec, args.task, args.grid)
        except ValidationError:
            continue
        pred = pipeline.predict_baseline(case, args.domain)
        base = out / case_id.replace("/", "_")
        base.mkdir(parents=True, exist_ok=True)
        for term, arr in pred.items():
            stream = container.make_stream(
                "bmode2d", np.asarray(arr, np.float32),
                np.arange(np.asarray(arr).shape[-3], dtype=float))
            container.write_stream_blob(stream, base / f"task{args.task}_{term}.exfl")
    return EXIT_OK


def _score_one(item, args):
    case_id, rec_dir, fold = item
    rec = container.read_recording(rec_dir)
    try:
        case = pipeline.prepare_case(rec, args.task, args.grid)
    except ValidationError as e:
        return case_id, fold, None, f"skipped: {e}"
    if args.filter:
        result = filter_recording(rec, args.task)
        if not result.accept:
            return case_id, fold, None, "filtered: " + "; ".join(result.reasons)
    if args.pred == "baseline":
        pred = pipeline.predict_baseline(case, args.pred_domain)
    else:
        pred_dir = Path(args.pred) / case_id.replace("/", "_")
        streams = {}
        for f in sorted(pred_dir.glob(f"task{args.task}_*.exfl")):
            term = f.stem.split("_", 1)[1]
            streams[term] = container.read_stream_blob(f).data.astype(float)
        if not streams:
            return case_id, fold, None, f"skipped: no predictions in {pred_dir}"
        pred = pipeline.prediction_from_streams(case, streams)
    terms = pipeline.score_case(case, pred, score_domain=args.score_domain)
    return case_id, fold, terms, None


def _cmd_evaluate(args) -> int:
    out = _out_dir(args)
    cases = list(_find_recordings(Path(args.input)))
    jobs = max(1, args.jobs)
    if jobs == 1:
        results = [_score_one(item, args) for item in cases]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(lambda it: _score_one(it, args), cases))

    report = MetricReport()
    rows = []
    for case_id, fold, terms, note in results:
        if terms is None:
            print(f"{case_id}: {note}", file=sys.stderr)
            continue
        for term, value in terms.items():
            rows.append([case_id, args.task, term, value])
            report.add(CaseResult(case_id, args.task, term, value, fold))
    if not rows:
        raise ValidationError("no case was scored")
    _write_csv(out / "cases.csv", ["case_id", "task", "term", "value"], rows)

    folds = sorted({c.fold for c in report.cases if c.fold is not None})
    if folds:
        srows = []
        for term in report.terms():
            means = report.fold_means(term)
            for f in folds:
                vals = [c.value for c in report.cases
                        if c.fold == f and c.term == term and c.value is not None]
                srows.append([f, term, float(np.mean(vals)),
                              float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0])
            if len(means) > 1:
                agg = aggregate_folds([means[f] for f in sorted(means)], len(means))
                srows.append(["overall", term, agg.mean, agg.std])
        _write_csv(out / "folds.csv", ["fold", "term", "mean", "std"], srows)
    print(f"evaluated {len(rows)} terms -> {out / 'cases.csv'}")
    return EXIT_OK


def _cmd_folds(args) -> int:
    root = Path(args.input)
    manifests = []
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        if (sub / container.EXAM_NAME).is_file():
            manifest, _ = _read_exam_header(sub)
            manifests.append((sub, manifest))
    if not manifests:
        raise ValidationError(f"{root}: no exams found")
    assignment = make_patient_folds([m for _, m in manifests],
                                    args.n_folds, args.seed)
    rows = [[m.exam_id, m.patient_key, assignment[m.patient_key]]
            for _, m in manifests]
    _write_csv(_out_dir(args) / "folds.csv", ["exam_id", "patient_key", "fold"], rows)
    if args.apply:
        for sub, m in manifests:
            _, doc = _read_exam_header(sub)
            doc["fold"] = assignment[m.patient_key]
            _atomic_write_bytes(sub / container.EXAM_NAME,
                                container._dump_json(doc))
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="echokit",
                                description="Beamspace echocardiography toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, output=True):
        if output:
            sp.add_argument("-o", "--output", default=None,
                            help=f"output directory (default ${OUT_DIR_ENV})")

    sp = sub.add_parser("inspect", help="print stream tables of recordings")
    sp.add_argument("input")
    sp.set_defaults(func=_cmd_inspect)

    sp = sub.add_parser("convert", help="scan-convert streams to PGM images")
    sp.add_argument("input")
    sp.add_argument("--grid", type=int, default=256)
    sp.add_argument("--jobs", type=int, default=1)
    common(sp)
    sp.set_defaults(func=_cmd_convert)

    sp = sub.add_parser("align", help="R peaks, phases, and stream pairing CSVs")
    sp.add_argument("input")
    sp.add_argument("--slack", type=float, default=1.5)
    common(sp)
    sp.set_defaults(func=_cmd_align)

    sp = sub.add_parser("stitch", help="reassemble gated sub-acquisitions")
    sp.add_argument("input")
    sp.add_argument("--max-cv", type=float, default=0.10)
    common(sp)
    sp.set_defaults(func=_cmd_stitch)

    sp = sub.add_parser("rasterize", help="contour annotations to label PGMs")
    sp.add_argument("input")
    sp.add_argument("--grid", type=int, default=256)
    common(sp)
    sp.set_defaults(func=_cmd_rasterize)

    sp = sub.add_parser("evaluate", help="score predictions against targets")
    sp.add_argument("input")
    sp.add_argument("--task", type=int, choices=pipeline.TASKS, required=True)
    sp.add_argument("--pred", default="baseline",
                    help="'baseline' or a prediction directory")
    sp.add_argument("--pred-domain", choices=("beamspace", "cartesian"),
                    default="beamspace")
    sp.add_argument("--score-domain", choices=("cartesian", "beamspace"),
                    default="cartesian")
    sp.add_argument("--grid", type=int, default=256)
    sp.add_argument("--filter", action="store_true",
                    help="apply the per-task recording filters")
    sp.add_argument("--jobs", type=int, default=1)
    common(sp)
    sp.set_defaults(func=_cmd_evaluate)

    sp = sub.add_parser("phantom", help="generate a synthetic exam with truth")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--hr", type=float, default=75.0)
    sp.add_argument("--beats", type=int, default=3)
    sp.add_argument("--rr-cv", type=float, default=0.0)
    sp.add_argument("--snr", type=float, default=25.0)
    sp.add_argument("--no-volume", action="store_true")
    sp.add_argument("--subacqs", type=int, default=0)
    common(sp)
    sp.set_defaults(func=_cmd_phantom)

    sp = sub.add_parser("baseline", help="write temporal-mean prediction blobs")
    sp.add_argument("input")
    sp.add_argument("--task", type=int, choices=pipeline.TASKS, required=True)
    sp.add_argument("--domain", choices=("beamspace", "cartesian"),
                    default="beamspace")
    sp.add_argument("--grid", type=int, default=256)
    common(sp)
    sp.set_defaults(func=_cmd_baseline)

    sp = sub.add_parser("folds", help="patient-grouped fold assignment")
    sp.add_argument("input")
    sp.add_argument("--n-folds", type=int, default=5)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--apply", action="store_true",
                    help="write folds back into exam.json files")
    common(sp)
    sp.set_defaults(func=_cmd_folds)
    return p


def run(argv=None) -> int:
    """Parse and dispatch; returns the process exit code."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE
    try:
        return args.func(args)
    except RefusalError as e:
        print(f"refused: {e}", file=sys.stderr)
        return EXIT_REFUSED
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except EchoKitError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())
