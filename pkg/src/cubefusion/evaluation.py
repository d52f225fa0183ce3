"""Detection metrics: rotated-box IoU, average precision, and report aggregation.

The protocol follows the common KITTI-style scheme: greedy score-descending
matching against ground truth at a fixed IoU threshold, then 40-recall-point
interpolated average precision. Totals are ground-truth-count-weighted
averages across classes. Slices with zero ground truth are reported as
absent (None), never as zero.
"""

from __future__ import annotations

import copy
import csv
import json
from pathlib import Path

import numpy as np

from .boxes import CLASS_NAMES, Box3D

CONDITIONS = ("normal", "overcast", "fog", "rain", "sleet", "light_snow", "heavy_snow")
DAYTIMES = ("day", "night")

NUM_RECALL_POINTS = 40


def _polygon_area(poly: np.ndarray) -> float:
    """Shoelace area of a CCW polygon (n, 2); 0 for fewer than 3 vertices."""
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y)))


def _clip_polygon(subject: np.ndarray, clipper: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of a convex polygon against a convex CCW clipper."""
    output = list(subject)
    n = len(clipper)
    for i in range(n):
        a = clipper[i]
        b = clipper[(i + 1) % n]
        edge = b - a
        points = output
        output = []
        if not points:
            break
        for j, p in enumerate(points):
            q = points[(j + 1) % len(points)]
            p_in = edge[0] * (p[1] - a[1]) - edge[1] * (p[0] - a[0]) >= 0
            q_in = edge[0] * (q[1] - a[1]) - edge[1] * (q[0] - a[0]) >= 0
            if p_in:
                output.append(p)
            if p_in != q_in:
                d = q - p
                denom = edge[0] * d[1] - edge[1] * d[0]
                if abs(denom) > 1e-12:
                    t = (edge[0] * (a[1] - p[1]) - edge[1] * (a[0] - p[0])) / denom
                    output.append(p + np.clip(t, 0.0, 1.0) * d)
    return np.array(output) if output else np.zeros((0, 2))


def bev_intersection_area(a: Box3D, b: Box3D) -> float:
    return _polygon_area(_clip_polygon(a.bev_corners(), b.bev_corners()))


def iou_bev(a: Box3D, b: Box3D) -> float:
    """IoU of the heading-rotated BEV footprints."""
    inter = bev_intersection_area(a, b)
    if inter <= 0.0:
        return 0.0
    area_a = a.size[0] * a.size[1]
    area_b = b.size[0] * b.size[1]
    union = area_a + area_b - inter
    return float(inter / union) if union > 0 else 0.0


def iou_3d(a: Box3D, b: Box3D) -> float:
    """3D IoU: rotated BEV intersection times vertical overlap over volume union."""
    inter_bev = bev_intersection_area(a, b)
    if inter_bev <= 0.0:
        return 0.0
    a_lo, a_hi = a.z_interval()
    b_lo, b_hi = b.z_interval()
    dz = min(a_hi, b_hi) - max(a_lo, b_lo)
    if dz <= 0.0:
        return 0.0
    inter = inter_bev * dz
    vol_a = float(np.prod(a.size))
    vol_b = float(np.prod(b.size))
    union = vol_a + vol_b - inter
    return float(inter / union) if union > 0 else 0.0


def _box_iou(a: Box3D, b: Box3D, box_mode: str) -> float:
    if box_mode == "bev":
        return iou_bev(a, b)
    if box_mode == "3d":
        return iou_3d(a, b)
    raise ValueError(f"unknown box mode {box_mode!r}")


def average_precision(detections: list[list[Box3D]], ground_truths: list[list[Box3D]],
                      iou_threshold: float, box_mode: str = "3d") -> float | None:
    """40-recall-point interpolated AP over per-frame detection/GT lists.

    Detections are matched greedily in score-descending order; each ground
    truth can absorb at most one detection, at IoU >= `iou_threshold`.
    Returns None when there is no ground truth at all (AP undefined).
    """
    if len(detections) != len(ground_truths):
        raise ValueError("detections and ground_truths must cover the same frames")
    num_gt = sum(len(g) for g in ground_truths)
    if num_gt == 0:
        return None

    flat = [(d.score, f, d) for f, dets in enumerate(detections) for d in dets]
    flat.sort(key=lambda item: -item[0])
    gt_used = [np.zeros(len(g), dtype=bool) for g in ground_truths]

    tp = np.zeros(len(flat))
    fp = np.zeros(len(flat))
    for i, (_, f, det) in enumerate(flat):
        gts = ground_truths[f]
        best_iou, best_j = 0.0, -1
        for j, gt in enumerate(gts):
            if gt_used[f][j]:
                continue
            iou = _box_iou(det, gt, box_mode)
            if iou > best_iou:
                best_iou, best_j = iou, j
        if best_j >= 0 and best_iou >= iou_threshold:
            tp[i] = 1
            gt_used[f][best_j] = True
        else:
            fp[i] = 1

    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(fp)
    recall = tp_cum / num_gt
    precision = tp_cum / np.maximum(tp_cum + fp_cum, 1e-12)

    ap = 0.0
    for k in range(1, NUM_RECALL_POINTS + 1):
        t = k / NUM_RECALL_POINTS
        mask = recall >= t
        ap += float(precision[mask].max()) if np.any(mask) else 0.0
    return ap / NUM_RECALL_POINTS


def range_bin_edges(range_max: float) -> list[tuple[float, float]]:
    """Detection-range slices; the last bin extends to the sensor range limit."""
    return [(0.0, 10.0), (10.0, 30.0), (30.0, 50.0), (50.0, float(range_max))]


def _slice_map(detections, ground_truths, iou_thresholds, box_modes, class_ids):
    """Per-class APs and their GT-weighted mean for one slice of frames."""
    per_class = {}
    gt_counts = {}
    for cid in class_ids:
        dets_c = [[d for d in dets if d.class_id == cid] for dets in detections]
        gts_c = [[g for g in gts if g.class_id == cid] for gts in ground_truths]
        gt_counts[cid] = sum(len(g) for g in gts_c)
        per_class[cid] = {
            mode: {thr: average_precision(dets_c, gts_c, thr, mode) for thr in iou_thresholds}
            for mode in box_modes
        }
    total = {}
    for mode in box_modes:
        total[mode] = {}
        for thr in iou_thresholds:
            weighted = [(gt_counts[c], per_class[c][mode][thr]) for c in class_ids
                        if gt_counts[c] > 0 and per_class[c][mode][thr] is not None]
            if weighted:
                wsum = sum(w for w, _ in weighted)
                total[mode][thr] = sum(w * ap for w, ap in weighted) / wsum
            else:
                total[mode][thr] = None
    return per_class, total, gt_counts


def aggregate_report(frames: list[dict], range_max: float,
                     iou_thresholds=(0.3, 0.5, 0.7),
                     box_modes=("3d", "bev"),
                     class_names=CLASS_NAMES) -> dict:
    """Build the full evaluation report from per-frame results.

    Each frame dict carries: `detections` (list[Box3D] with scores), `gts`
    (list[Box3D]), `condition`, `daytime`. Totals are weighted by per-class
    ground-truth counts; slices with zero ground truth are reported as None.
    """
    iou_thresholds = [float(t) for t in iou_thresholds]
    class_ids = list(range(len(class_names)))
    dets = [f["detections"] for f in frames]
    gts = [f["gts"] for f in frames]

    def fmt_total(total):
        return {m: {f"{t:g}": total[m][t] for t in iou_thresholds} for m in box_modes}

    per_class, total, gt_counts = _slice_map(dets, gts, iou_thresholds, box_modes, class_ids)
    report = {
        "num_frames": len(frames),
        "iou_thresholds": iou_thresholds,
        "box_modes": list(box_modes),
        "classes": {
            class_names[c]: {"gt_count": gt_counts[c], "ap": fmt_total(per_class[c])}
            for c in class_ids
        },
        "total": {"gt_count": sum(gt_counts.values()), "map": fmt_total(total)},
    }

    def tagged_slice(pred):
        idx = [i for i, f in enumerate(frames) if pred(f)]
        sl_dets = [dets[i] for i in idx]
        sl_gts = [gts[i] for i in idx]
        _, sl_total, sl_counts = _slice_map(sl_dets, sl_gts, iou_thresholds, box_modes, class_ids)
        return {"num_frames": len(idx), "gt_count": sum(sl_counts.values()),
                "map": fmt_total(sl_total)}

    report["conditions"] = {tag: tagged_slice(lambda f, t=tag: f["condition"] == t)
                            for tag in CONDITIONS}
    report["daytimes"] = {tag: tagged_slice(lambda f, t=tag: f["daytime"] == t)
                          for tag in DAYTIMES}

    ranges = {}
    for lo, hi in range_bin_edges(range_max):
        key = f"{lo:g}-{hi:g}"
        sl_dets = [[d for d in ds if lo <= d.range < hi or (hi >= range_max and d.range == hi)]
                   for ds in dets]
        sl_gts = [[g for g in gs if lo <= g.range < hi or (hi >= range_max and g.range == hi)]
                  for gs in gts]
        _, sl_total, sl_counts = _slice_map(sl_dets, sl_gts, iou_thresholds, box_modes, class_ids)
        ranges[key] = {"gt_count": sum(sl_counts.values()), "map": fmt_total(sl_total)}
    report["ranges"] = ranges
    return report


def write_report(report: dict, out_dir: str | Path) -> None:
    """Persist a report as JSON plus a CSV of per-condition mAP rows."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "report.json", "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)

    with open(out_dir / "report.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["box_mode", "iou"] + list(CONDITIONS) + ["total"])
        for mode in report["box_modes"]:
            for thr in report["iou_thresholds"]:
                key = f"{thr:g}"
                row = [mode, key]
                for tag in CONDITIONS:
                    v = report["conditions"][tag]["map"][mode][key]
                    row.append("" if v is None else f"{v:.4f}")
                total = report["total"]["map"][mode][key]
                row.append("" if total is None else f"{total:.4f}")
                writer.writerow(row)


def simulate_sensor_failure(sample: dict, failed: str | None) -> dict:
    """Zero out one modality's raw input; the pipeline must still run.

    `sample` holds the raw inputs of one frame (`camera`: CameraFrame,
    `cube`: RadarCube). Model weights and all downstream code are untouched.
    """
    if failed is None or failed == "none":
        return sample
    if failed not in ("camera", "radar"):
        raise ValueError(f"unknown modality {failed!r}; expected 'camera' or 'radar'")
    out = dict(sample)
    if failed == "camera":
        frame = copy.deepcopy(sample["camera"])
        frame.pixels = np.zeros_like(frame.pixels)
        out["camera"] = frame
    else:
        cube = copy.deepcopy(sample["cube"])
        cube.power = np.zeros_like(cube.power)
        out["cube"] = cube
    return out
