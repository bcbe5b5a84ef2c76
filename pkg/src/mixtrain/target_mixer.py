"""Merge teacher pseudo boxes into human annotations.

Three strategies share one greedy IoU matching:

* ``missing``   -- add pseudo boxes whose best IoU with every human box is < 0.5
* ``loc_noise`` -- a matched (IoU >= 0.5) same-category pseudo box replaces its
  human box
* ``hybrid``    -- both at once
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Literal, Sequence

import numpy as np

from .box_geometry import iou_matrix
from .synthetic_data import LabeledBox

MergeStrategy = Literal["off", "missing", "loc_noise", "hybrid"]
MATCH_IOU = 0.5


@dataclass
class MixResult:
    targets: list[LabeledBox]
    n_added: int = 0
    n_replaced: int = 0


def _boxes(items: Sequence[LabeledBox]) -> np.ndarray:
    return np.array([t.box.as_list() for t in items], dtype=np.float64).reshape(-1, 4)


def iou_match(
    pseudo: Sequence[LabeledBox], gt: Sequence[LabeledBox], threshold: float = MATCH_IOU
) -> list[tuple[int, int, float]]:
    """Greedy one-to-one matching by descending IoU.

    Returns ``(pseudo_index, gt_index, iou)`` triples with ``iou >= threshold``.
    Ties are broken by ``(pseudo_index, gt_index)``.
    """
    ious = iou_matrix(_boxes(pseudo), _boxes(gt))
    pi, gi = np.nonzero(ious >= threshold)
    if len(pi) == 0:
        return []
    order = np.lexsort((gi, pi, -ious[pi, gi]))
    used_p, used_g = set(), set()
    matches = []
    for k in order:
        p, g = int(pi[k]), int(gi[k])
        if p in used_p or g in used_g:
            continue
        used_p.add(p)
        used_g.add(g)
        matches.append((p, g, float(ious[p, g])))
    return matches


def _unmatched_additions(gt: Sequence[LabeledBox], pseudo: Sequence[LabeledBox], skip: set[int]) -> list[LabeledBox]:
    if not pseudo:
        return []
    if not gt:
        return [p for i, p in enumerate(pseudo) if i not in skip]
    best = iou_matrix(_boxes(pseudo), _boxes(gt)).max(axis=1)
    return [p for i, p in enumerate(pseudo) if i not in skip and best[i] < MATCH_IOU]


def merge_missing_labels(gt: Sequence[LabeledBox], pseudo: Sequence[LabeledBox]) -> MixResult:
    added = _unmatched_additions(gt, pseudo, set())
    return MixResult(list(gt) + added, n_added=len(added))


def _replace_matched(gt: Sequence[LabeledBox], pseudo: Sequence[LabeledBox], matches) -> tuple[list[LabeledBox], int]:
    out = list(gt)
    n = 0
    for p, g, _ in matches:
        if pseudo[p].category != gt[g].category:
            continue
        out[g] = replace(gt[g], box=pseudo[p].box, provenance="pseudo", score=pseudo[p].score)
        n += 1
    return out, n


def merge_loc_noise(gt: Sequence[LabeledBox], pseudo: Sequence[LabeledBox]) -> MixResult:
    targets, n = _replace_matched(gt, pseudo, iou_match(pseudo, gt))
    return MixResult(targets, n_replaced=n)


def merge_hybrid(gt: Sequence[LabeledBox], pseudo: Sequence[LabeledBox]) -> MixResult:
    matches = iou_match(pseudo, gt)
    targets, n = _replace_matched(gt, pseudo, matches)
    added = _unmatched_additions(gt, pseudo, {p for p, _, _ in matches})
    return MixResult(targets + added, n_added=len(added), n_replaced=n)


def merge(gt: Sequence[LabeledBox], pseudo: Sequence[LabeledBox], strategy: MergeStrategy) -> MixResult:
    if strategy == "off":
        return MixResult(list(gt))
    if strategy == "missing":
        return merge_missing_labels(gt, pseudo)
    if strategy == "loc_noise":
        return merge_loc_noise(gt, pseudo)
    if strategy == "hybrid":
        return merge_hybrid(gt, pseudo)
    raise ValueError(f"unknown merge strategy {strategy!r}")
