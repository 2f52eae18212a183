"""End-to-end scoring: from recordings and predictions to metric terms.

Scoring always happens in the Cartesian domain: beamspace targets and
predictions are scan-converted first, and metrics average over the pixels
inside the validity mask (outside-sector pixels are synthetic zeros, not
data). Asking for beamspace-domain scoring is refused.

Temporal-mean baselines come in two variants matching the two input
domains: the beamspace path averages in beamspace and converts the result;
the Cartesian path averages the already-converted target.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .container import Recording
from .errors import RefusalError, ValidationError
from .geometry import convert_series, default_grid_for
from .metrics import (ColorBox, MaskParams, dice_score, masked_dice_loss,
                      task1_loss, task2_loss, temporal_mean_baseline,
                      turbulence_proxy, valid_velocity_mask)
from .phantom import COLOR_BOX_LABEL, box_mask_from_marker

TASKS = (1, 2, 3)
TERMS = {1: ("velocity",), 2: ("velocity", "power", "variation"),
         3: ("dice_pct", "dice_loss")}


@dataclass
class CaseArrays:
    """Cartesian-domain target arrays of one case plus scoring context."""

    task: int
    target: dict          # term/ingredient name -> (T, H, W) array
    beamspace: dict       # the native-domain counterparts
    valid: np.ndarray     # (H, W) validity mask
    nyquist: float | None
    grid: object
    geom: object
    annotated: np.ndarray | None = None   # task 3 frame flags


def _nearest_indices(ts_ref, ts_query):
    pos = np.searchsorted(ts_ref, ts_query)
    left = np.clip(pos - 1, 0, ts_ref.size - 1)
    right = np.clip(pos, 0, ts_ref.size - 1)
    return np.where(np.abs(ts_query - ts_ref[left])
                    <= np.abs(ts_ref[right] - ts_query), left, right)


def prepare_case(rec: Recording, task: int, grid_size: int = 256) -> CaseArrays:
    """Assemble the Cartesian target arrays for one recording and task."""
    if task == 1:
        target = rec.stream_of("tdi2d")
        geom = rec.geometry_of(target)
        grid = default_grid_for(geom, grid_size)
        v_b = target.data.astype(float)
        v_c, valid = convert_series(v_b, geom, grid)
        return CaseArrays(1, {"velocity": v_c}, {"velocity": v_b}, valid,
                          target.header.nyquist_velocity, grid, geom)

    if task == 2:
        color = rec.stream_of("color2d")
        bmode = rec.stream_of("bmode2d")
        geom = rec.geometry_of(color)
        grid = default_grid_for(geom, grid_size)
        data = color.data.astype(float)
        if data.ndim != 4 or data.shape[1] != 2:
            raise ValidationError(
                "color2d stream must have shape (T, 2, beams, samples) "
                "with velocity and power channels")
        v_b, p_b = data[:, 0], data[:, 1]
        s_b = turbulence_proxy(v_b)
        # B-mode frame nearest each Doppler frame gates the mask
        idx = _nearest_indices(bmode.header.timestamps, color.header.timestamps)
        b_b = bmode.data.astype(float)[idx]
        boxes = [m for m in rec.annotations.markers if m.label == COLOR_BOX_LABEL]
        if not boxes:
            raise ValidationError("recording has no color_box marker")
        box_b = box_mask_from_marker(boxes[0], v_b.shape[-2:])

        v_c, valid = convert_series(v_b, geom, grid)
        p_c, _ = convert_series(p_b, geom, grid)
        s_c, _ = convert_series(s_b, geom, grid)
        b_c, _ = convert_series(b_b, geom, grid)
        box_img, _ = convert_series(box_b.astype(float), geom, grid)
        box_c = box_img >= 0.5
        target = {"velocity": v_c, "power": p_c, "variation": s_c,
                  "bmode": b_c, "box": np.broadcast_to(box_c, v_c.shape).copy()}
        native = {"velocity": v_b, "power": p_b, "variation": s_b,
                  "bmode": b_b, "box": box_b}
        return CaseArrays(2, target, native, valid,
                          color.header.nyquist_velocity, grid, geom)

    if task == 3:
        from .annotations import rasterize_contours  # local to avoid cycle noise

        bmode = rec.stream_of("bmode2d")
        geom = rec.geometry_of(bmode)
        grid = default_grid_for(geom, grid_size)
        endo = [c for c in rec.annotations.contours if c.layer == "endo"]
        epi = [c for c in rec.annotations.contours if c.layer == "epi"]
        if not endo:
            raise ValidationError("recording has no endocardial contours")
        endo = endo[0]
        epi = epi[0] if epi else None
        n_frames = bmode.header.n_frames
        annotated = np.zeros(n_frames, bool)
        labels = np.zeros((n_frames, grid.height, grid.width), np.uint8)
        for j, verts in enumerate(endo.frames):
            t = endo.first_frame + j
            if t >= n_frames:
                break
            epi_verts = None
            if epi is not None and 0 <= t - epi.first_frame < len(epi.frames):
                epi_verts = epi.frames[t - epi.first_frame]
            labels[t] = rasterize_contours(verts, epi_verts, grid)
            annotated[t] = True
        b_c, valid = convert_series(bmode.data.astype(float), geom, grid)
        return CaseArrays(3, {"labels": labels, "bmode": b_c},
                          {"bmode": bmode.data.astype(float)}, valid, None,
                          grid, geom, annotated=annotated)

    raise ValidationError(f"unknown task {task}")


def predict_baseline(case: CaseArrays, domain: str = "beamspace") -> dict:
    """Temporal-mean prediction in the requested input domain.

    beamspace: average the native streams, then scan-convert the averages.
    cartesian: average the already-converted target arrays.
    """
    if domain not in ("beamspace", "cartesian"):
        raise ValidationError(f"unknown prediction domain {domain!r}")
    if case.task in (1, 2):
        keys = ["velocity"] if case.task == 1 else ["velocity", "power", "variation"]
        if domain == "cartesian":
            return {k: temporal_mean_baseline(case.target[k]) for k in keys}
        out = {}
        for k in keys:
            mean_b = temporal_mean_baseline(case.beamspace[k])
            conv, _ = convert_series(mean_b, case.geom, case.grid)
            out[k] = conv
        return out
    # segmentation: per-pixel class frequency over annotated frames
    labels = case.target["labels"]
    ann = case.annotated
    onehot = np.stack([(labels[ann] == c).astype(float) for c in range(3)])
    probs = onehot.mean(axis=1)
    t = labels.shape[0]
    return {"probs": np.broadcast_to(probs[:, None], (3, t) + probs.shape[1:]).copy(),
            "labels": np.broadcast_to(np.argmax(probs, axis=0)[None],
                                      labels.shape).copy()}


def prediction_from_streams(case: CaseArrays, streams: dict) -> dict:
    """Adapt prediction arrays (beamspace- or Cartesian-shaped) for scoring."""
    out = {}
    for key, arr in streams.items():
        arr = np.asarray(arr, float)
        native = case.beamspace.get(key if key != "probs" else "bmode")
        if key in ("labels", "probs"):
            out[key] = arr
            continue
        if native is not None and arr.shape == native.shape:
            conv, _ = convert_series(arr, case.geom, case.grid)
            out[key] = conv
        elif arr.shape == case.target[key].shape:
            out[key] = arr
        else:
            raise ValidationError(
                f"prediction {key} shape {arr.shape} matches neither the "
                f"beamspace nor the Cartesian target")
    return out


def score_case(case: CaseArrays, pred: dict, *, score_domain: str = "cartesian",
               mask_params: MaskParams = MaskParams()) -> dict:
    """Metric terms for one case. Only Cartesian-domain scoring is allowed;
    beamspace predictions must be scan-converted first."""
    if score_domain != "cartesian":
        raise RefusalError(
            "refusing to score in the beamspace domain; predictions are "
            "scan-converted to Cartesian before metric computation")
    valid = case.valid
    if case.task == 1:
        sel = lambda a: a[:, valid]  # noqa: E731
        return {"velocity": task1_loss(sel(pred["velocity"]),
                                       sel(case.target["velocity"]),
                                       case.nyquist)}
    if case.task == 2:
        mask, _ = valid_velocity_mask(ColorBox(case.target["box"]),
                                      case.target["power"],
                                      case.target["bmode"], mask_params)
        sel = lambda a: np.asarray(a, float)[:, valid]  # noqa: E731
        terms = task2_loss(sel(pred["velocity"]), sel(pred["power"]),
                           sel(pred["variation"]),
                           sel(case.target["velocity"]),
                           sel(case.target["power"]),
                           sel(case.target["variation"]), sel(mask))
        return {"velocity": terms.velocity, "power": terms.power,
                "variation": terms.variation}
    labels = case.target["labels"]
    ann = case.annotated
    out = {"dice_pct": dice_score(pred["labels"], labels, ann)}
    if "probs" in pred:
        out["dice_loss"] = masked_dice_loss(pred["probs"], labels, ann)
    return out


def score_recording(rec: Recording, task: int, pred_source="baseline", *,
                    grid_size: int = 256, pred_domain: str = "beamspace",
                    score_domain: str = "cartesian",
                    mask_params: MaskParams = MaskParams()) -> dict:
    """Convenience wrapper: prepare, predict (or adapt), and score."""
    case = prepare_case(rec, task, grid_size)
    if pred_source == "baseline":
        pred = predict_baseline(case, pred_domain)
    else:
        pred = prediction_from_streams(case, pred_source)
    return score_case(case, pred, score_domain=score_domain,
                      mask_params=mask_params)
