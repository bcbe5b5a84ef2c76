"""COCO-style box mAP (101-point interpolated AP over IoU 0.50:0.05:0.95)."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .box_geometry import ScoredBox, area_array, iou_matrix

IOU_THRESHOLDS = np.round(np.linspace(0.5, 0.95, 10), 2)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
# area ranges as fractions of the image area, scaled for 64x64 scenes
AREA_RANGES = {"all": (0.0, np.inf), "small": (0.0, 0.015), "medium": (0.015, 0.08), "large": (0.08, np.inf)}


@dataclass
class EvalResult:
    map: float
    map50: float
    map75: float
    per_category: dict[int, float] = field(default_factory=dict)
    map_small: float | None = None
    map_medium: float | None = None
    map_large: float | None = None

    def to_json(self) -> str:
        payload = asdict(self)
        payload["per_category"] = {str(k): v for k, v in self.per_category.items()}
        return json.dumps(payload, indent=2)

    def save(self, path: Path) -> None:
        Path(path).write_text(self.to_json())


def _gt_arrays(gts) -> tuple[np.ndarray, np.ndarray]:
    boxes = np.array([g.box.as_list() for g in gts], dtype=np.float64).reshape(-1, 4)
    cats = np.array([g.category for g in gts], dtype=np.int64)
    return boxes, cats


def _det_arrays(dets: Sequence[ScoredBox]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    boxes = np.array([d.box.as_list() for d in dets], dtype=np.float64).reshape(-1, 4)
    scores = np.array([d.score for d in dets], dtype=np.float64)
    cats = np.array([d.category for d in dets], dtype=np.int64)
    return boxes, scores, cats


def _greedy_match(ious: np.ndarray, thr: float, gt_ignore: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Score-ordered matching; rows are detections (already sorted), columns gts.

    Returns ``(tp, det_ignored)``; a detection matched to an ignored gt is
    itself ignored. Non-ignored gts are preferred over ignored ones.
    """
    n_det, n_gt = ious.shape
    tp = np.zeros(n_det, dtype=bool)
    ignored = np.zeros(n_det, dtype=bool)
    if n_gt == 0:
        return tp, ignored
    if gt_ignore is None:
        gt_ignore = np.zeros(n_gt, dtype=bool)
    used = np.zeros(n_gt, dtype=bool)
    for d in range(n_det):
        best = -1
        for pool in (~gt_ignore, gt_ignore):
            row = np.where(pool & ~used, ious[d], -1.0)
            g = int(row.argmax())
            if row[g] >= thr:
                best = g
                break
        if best >= 0:
            used[best] = True
            if gt_ignore[best]:
                ignored[d] = True
            else:
                tp[d] = True
    return tp, ignored


def match_detections(dets: Sequence[ScoredBox], gts, iou_thr: float) -> np.ndarray:
    """TP flags for ``dets`` (sorted by descending score) against one image's gts."""
    tp = np.zeros(len(dets), dtype=bool)
    if not dets:
        return tp
    d_boxes, _, d_cats = _det_arrays(dets)
    g_boxes, g_cats = _gt_arrays(gts)
    for c in np.unique(d_cats):
        di = np.flatnonzero(d_cats == c)
        gi = np.flatnonzero(g_cats == c)
        flags, _ = _greedy_match(iou_matrix(d_boxes[di], g_boxes[gi]), iou_thr)
        tp[di] = flags
    return tp


def average_precision(tp: Sequence[bool], n_gt: int, scores: Sequence[float] | None = None) -> float | None:
    """101-point interpolated AP; ``None`` when undefined (no gt, no detections).

    ``tp`` is in ranking order unless ``scores`` is given, in which case it is
    re-sorted by descending score (stable).
    """
    tp = np.asarray(tp, dtype=bool)
    if scores is not None:
        tp = tp[np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")]
    if n_gt == 0:
        return None if len(tp) == 0 else 0.0
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    precision = ctp / (ctp + cfp)
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    # recall >= k/100 tested in integers so that e.g. 3/10 reaches the 0.30 point
    idx = np.searchsorted(100 * ctp, np.arange(len(RECALL_POINTS)) * n_gt, side="left")
    sampled = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(sampled.mean())


def _evaluate(
    det_boxes, det_scores, det_cats, gt_boxes, gt_cats, categories, thresholds, image_area, area_range
) -> dict[int, list[float | None]]:
    """AP per category per threshold over a list of images."""
    lo, hi = area_range
    out: dict[int, list[float | None]] = {}
    for c in categories:
        per_thr = []
        for thr in thresholds:
            all_scores, all_tp, n_gt = [], [], 0
            for db, ds, dc, gb, gc in zip(det_boxes, det_scores, det_cats, gt_boxes, gt_cats):
                dsel = np.flatnonzero(dc == c)
                gsel = np.flatnonzero(gc == c)
                g_area = area_array(gb[gsel]) / image_area
                g_ignore = (g_area < lo) | (g_area >= hi)
                n_gt += int((~g_ignore).sum())
                if len(dsel) == 0:
                    continue
                order = dsel[np.argsort(-ds[dsel], kind="stable")]
                tp, ign = _greedy_match(iou_matrix(db[order], gb[gsel]), thr, g_ignore)
                d_area = area_array(db[order]) / image_area
                out_of_range = (~tp) & ((d_area < lo) | (d_area >= hi))
                keep = ~(ign | out_of_range)
                all_scores.append(ds[order][keep])
                all_tp.append(tp[keep])
            scores = np.concatenate(all_scores) if all_scores else np.zeros(0)
            tps = np.concatenate(all_tp) if all_tp else np.zeros(0, dtype=bool)
            per_thr.append(average_precision(tps, n_gt, scores))
        out[c] = per_thr
    return out


def _mean_defined(values) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def coco_map(
    detections: Sequence[Sequence[ScoredBox]],
    ground_truths: Sequence[Sequence],
    num_classes: int | None = None,
    image_size: float = 64.0,
    max_detections: int = 100,
    size_breakdown: bool = False,
) -> EvalResult:
    """mAP over images; ``ground_truths`` should be the clean annotations."""
    if len(detections) != len(ground_truths):
        raise ValueError("detections and ground truths cover different image counts")
    det_boxes, det_scores, det_cats, gt_boxes, gt_cats = [], [], [], [], []
    for dets, gts in zip(detections, ground_truths):
        dets = sorted(dets, key=lambda d: -d.score)[:max_detections]
        b, s, c = _det_arrays(dets)
        det_boxes.append(b)
        det_scores.append(s)
        det_cats.append(c)
        gb, gc = _gt_arrays(gts)
        gt_boxes.append(gb)
        gt_cats.append(gc)
    if num_classes is None:
        present = np.concatenate(det_cats + gt_cats) if (det_cats or gt_cats) else np.zeros(0, dtype=np.int64)
        categories = sorted(int(c) for c in np.unique(present))
    else:
        categories = list(range(num_classes))
    image_area = float(image_size) ** 2

    def summarize(area_range):
        aps = _evaluate(det_boxes, det_scores, det_cats, gt_boxes, gt_cats, categories, IOU_THRESHOLDS, image_area, area_range)
        per_cat = {c: _mean_defined(v) for c, v in aps.items()}
        overall = _mean_defined(per_cat.values())
        at50 = _mean_defined(v[0] for v in aps.values())
        at75 = _mean_defined(v[5] for v in aps.values())
        return overall, at50, at75, per_cat

    overall, at50, at75, per_cat = summarize(AREA_RANGES["all"])
    result = EvalResult(
        map=overall or 0.0,
        map50=at50 or 0.0,
        map75=at75 or 0.0,
        per_category={c: v for c, v in per_cat.items() if v is not None},
    )
    if size_breakdown:
        result.map_small = summarize(AREA_RANGES["small"])[0]
        result.map_medium = summarize(AREA_RANGES["medium"])[0]
        result.map_large = summarize(AREA_RANGES["large"])[0]
    return result
