"""Axis-aligned box arithmetic: area, IoU and non-maximum suppression.

Boxes are ``[x_min, y_min, x_max, y_max]`` in continuous pixel coordinates.
The scalar helpers work on :class:`Box` values; the ``*_array`` helpers work
on ``(N, 4)`` arrays and are what the hot paths (assignment, decoding,
evaluation) use.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class Box:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self) -> None:
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"non-finite box coordinates: {coords}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box: {coords}")

    @classmethod
    def from_array(cls, xyxy: Sequence[float]) -> "Box":
        x0, y0, x1, y1 = (float(v) for v in xyxy)
        return cls(x0, y0, x1, y1)

    def as_array(self) -> np.ndarray:
        return np.array([self.x_min, self.y_min, self.x_max, self.y_max], dtype=np.float64)

    def as_list(self) -> list[float]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min


@dataclass(frozen=True)
class ScoredBox:
    box: Box
    score: float
    category: int

    def __post_init__(self) -> None:
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score outside [0, 1]: {self.score}")
        if self.category < 0:
            raise ValueError(f"negative category: {self.category}")


def area(b: Box) -> float:
    return (b.x_max - b.x_min) * (b.y_max - b.y_min)


def iou(a: Box, b: Box) -> float:
    if a == b:
        return 1.0
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    return inter / (area(a) + area(b) - inter)


def area_array(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    return (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``(N, 4)`` and ``(M, 4)`` box arrays -> ``(N, M)``."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)
    union = area_array(a)[:, None] + area_array(b)[None, :] - inter
    out = inter / union
    # exact 1 for identical boxes regardless of rounding in the union
    same = np.all(a[:, None, :] == b[None, :, :], axis=-1)
    out[same] = 1.0
    return out


def nms_indices(
    boxes: np.ndarray,
    scores: np.ndarray,
    categories: np.ndarray | None,
    iou_threshold: float,
) -> np.ndarray:
    """Greedy NMS on arrays; returns kept indices ordered by descending score.

    Ties on score keep input order. With ``categories=None`` suppression is
    category-agnostic.
    """
    if not (0.0 < iou_threshold <= 1.0):
        raise ValueError(f"iou_threshold must lie in (0, 1], got {iou_threshold}")
    scores = np.asarray(scores, dtype=np.float64)
    n = len(scores)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.argsort(-scores, kind="stable")
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)[order]
    ious = iou_matrix(boxes, boxes)
    if categories is not None:
        cats = np.asarray(categories)[order]
        ious = np.where(cats[:, None] == cats[None, :], ious, 0.0)
    suppressed = np.zeros(n, dtype=bool)
    keep = []
    for i in range(n):
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed |= ious[i] > iou_threshold
    return order[np.asarray(keep, dtype=np.int64)]


def nms(
    dets: Sequence[ScoredBox],
    iou_threshold: float,
    class_agnostic: bool = False,
) -> list[ScoredBox]:
    if not dets:
        return []
    boxes = np.array([d.box.as_list() for d in dets])
    scores = np.array([d.score for d in dets])
    cats = None if class_agnostic else np.array([d.category for d in dets])
    return [dets[i] for i in nms_indices(boxes, scores, cats, iou_threshold)]
