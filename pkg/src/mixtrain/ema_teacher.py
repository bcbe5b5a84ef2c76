"""Exponential-moving-average teacher: pseudo boxes and target scores.

Pseudo-box generation and target scoring read the same teacher forward pass.
:func:`inspect` runs that single forward; :func:`predict_pseudo_boxes` and
:func:`score_targets` go through a one-entry cache so calling both on the
same image also costs one forward.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import detector
from .augmentation import affine_matrix, warp_image
from .box_geometry import Box, iou_matrix
from .detector import DetectorConfig, Proposals, decode_arrays, softmax
from .synthetic_data import LabeledBox


@dataclass(frozen=True)
class EmaState:
    params: np.ndarray
    momentum: float = 0.999
    update_count: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError("momentum must lie in [0, 1]")


def init_teacher(student: np.ndarray, momentum: float = 0.999) -> EmaState:
    return EmaState(np.array(student, copy=True), momentum, 0)


def ema_update(state: EmaState, student: np.ndarray) -> EmaState:
    if student.shape != state.params.shape:
        raise ValueError(f"student shape {student.shape} != teacher shape {state.params.shape}")
    m = state.momentum
    return EmaState(m * state.params + (1.0 - m) * student, m, state.update_count + 1)


@dataclass
class TeacherView:
    """Teacher output on one image, in that image's coordinates."""

    proposals: Proposals
    image_size: float
    scale: float = 1.0
    _probs: np.ndarray | None = field(default=None, repr=False)

    @property
    def probs(self) -> np.ndarray:
        if self._probs is None:
            self._probs = softmax(self.proposals.logits)
        return self._probs

    def pseudo_boxes(self, score_threshold: float = 0.9, nms_threshold: float = 0.5) -> list[LabeledBox]:
        boxes, scores, cats = decode_arrays(self.proposals, score_threshold, nms_threshold, self.image_size * self.scale)
        boxes = np.clip(boxes / self.scale, 0.0, self.image_size)
        out = []
        for b, s, c in zip(boxes, scores, cats):
            if b[2] > b[0] and b[3] > b[1]:
                out.append(LabeledBox(Box.from_array(b), int(c), "pseudo", float(s)))
        return out

    def scores(self, targets: Sequence[LabeledBox]) -> np.ndarray:
        """Teacher probability of each target's category at its best-matching proposal."""
        if not targets:
            return np.zeros(0)
        boxes = np.array([t.box.as_list() for t in targets]) * self.scale
        ious = iou_matrix(self.proposals.anchors, boxes)
        best = ious.argmax(axis=0)  # first max -> lowest proposal index on ties
        cats = np.array([t.category for t in targets])
        return self.probs[best, cats]


def _teacher_inputs(images: np.ndarray, cfg: DetectorConfig, scale: float) -> np.ndarray:
    if scale == 1.0:
        return images
    m = affine_matrix("scale_jitter", scale, cfg.image_size, cfg.image_size)
    return np.stack([warp_image(np.asarray(im, dtype=np.float64), m) for im in images])


def inspect_batch(
    state: EmaState, images: np.ndarray, cfg: DetectorConfig, scales: Sequence[float] | None = None
) -> list[TeacherView]:
    """One teacher forward over a batch of raw images.

    ``scales`` optionally rescales each input about the origin (the only
    augmentation the teacher input may receive); views report boxes back in
    the original coordinates.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    if scales is None:
        scales = [1.0] * len(images)
    inputs = np.stack([_teacher_inputs(im[None], cfg, s)[0] for im, s in zip(images, scales)])
    fp = detector.forward(state.params, inputs, cfg, keep_cache=False)
    return [TeacherView(fp[b], cfg.image_size, float(scales[b])) for b in range(len(images))]


def inspect(state: EmaState, image: np.ndarray, cfg: DetectorConfig, scale: float = 1.0) -> TeacherView:
    return inspect_batch(state, image, cfg, [scale])[0]


_last: dict = {}


def _cached_view(state: EmaState, image: np.ndarray, cfg: DetectorConfig, scale: float) -> TeacherView:
    image = np.ascontiguousarray(image, dtype=np.float64)
    key = (
        id(state.params),
        state.update_count,
        cfg,
        scale,
        hashlib.blake2b(image.tobytes(), digest_size=16).digest(),
    )
    if _last.get("key") != key:
        _last.clear()
        _last.update(key=key, view=inspect(state, image, cfg, scale), params=state.params)
    return _last["view"]


def predict_pseudo_boxes(
    state: EmaState,
    image: np.ndarray,
    cfg: DetectorConfig,
    score_threshold: float = 0.9,
    nms_threshold: float = 0.5,
    scale: float = 1.0,
) -> list[LabeledBox]:
    return _cached_view(state, image, cfg, scale).pseudo_boxes(score_threshold, nms_threshold)


def score_targets(
    state: EmaState, image: np.ndarray, targets: Sequence[LabeledBox], cfg: DetectorConfig, scale: float = 1.0
) -> np.ndarray:
    return _cached_view(state, image, cfg, scale).scores(targets)
