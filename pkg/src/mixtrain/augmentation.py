"""Normal / strong augmentation pipelines with box remapping.

Geometric transforms are affine maps applied with nearest-neighbour
resampling on a fixed canvas; uncovered pixels take the per-channel image
mean. Boxes follow the same map: the four corners are transformed, the
axis-aligned hull is taken and clipped to the canvas.
"""

from __future__ import annotations

import functools
import json
import math
from dataclasses import dataclass, field, replace
from typing import Literal

import numpy as np

from .box_geometry import Box
from .synthetic_data import LabeledBox, Sample

Strength = Literal["normal", "strong"]

PHOTOMETRIC = ("solarize", "brightness", "contrast", "sharpness")
GEOMETRIC = ("scale_jitter", "translate", "rotate", "shear")
STRONG_ONLY = ("translate", "rotate", "shear", "cutout")

# a remapped box survives if at least this fraction of its hull stays on canvas
MIN_VISIBLE_FRACTION = 0.25
MIN_BOX_AREA = 4.0


@dataclass(frozen=True)
class TransformSpec:
    kind: str
    probability: float
    magnitude_range: tuple[float, float]

    def __post_init__(self) -> None:
        lo, hi = self.magnitude_range
        if not lo <= hi:
            raise ValueError(f"empty magnitude range {self.magnitude_range}")
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError(f"probability {self.probability} outside [0, 1]")


@dataclass
class AugRecord:
    strength: Strength
    applied: list[tuple[str, object]] = field(default_factory=list)
    dropped: list[int] = field(default_factory=list)
    kept: list[int] = field(default_factory=list)

    @property
    def all_dropped(self) -> bool:
        return not self.kept and bool(self.dropped)

    def to_json(self, sample_id: int | None = None) -> str:
        payload = {
            "id": sample_id,
            "strength": self.strength,
            "applied": [[k, m] for k, m in self.applied],
            "dropped": self.dropped,
            "kept": self.kept,
        }
        return json.dumps(payload)


def build_pipeline(strength: Strength) -> list[TransformSpec]:
    """Transforms in their fixed application order.

    Scale jitter and cutout carry no firing probability and always fire.
    """
    if strength not in ("normal", "strong"):
        raise ValueError(f"unknown strength {strength!r}")
    specs = [
        TransformSpec("scale_jitter", 1.0, (0.5, 1.5)),
        TransformSpec("solarize", 0.25, (0.0, 1.0)),
        TransformSpec("brightness", 0.25, (0.0, 1.0)),
        TransformSpec("contrast", 0.25, (0.0, 1.0)),
        TransformSpec("sharpness", 0.25, (0.0, 1.0)),
    ]
    if strength == "strong":
        specs += [
            TransformSpec("translate", 0.3, (0.0, 0.1)),
            TransformSpec("rotate", 0.3, (0.0, 30.0)),
            TransformSpec("shear", 0.3, (0.0, 30.0)),
            TransformSpec("cutout", 1.0, (0.05, 0.2)),
        ]
    return specs


# --- photometric -----------------------------------------------------------


def _box_blur3(image: np.ndarray) -> np.ndarray:
    h, w = image.shape[:2]
    p = np.pad(image, ((1, 1), (1, 1), (0, 0)), mode="edge")
    acc = np.zeros_like(image)
    for dy in range(3):
        for dx in range(3):
            acc += p[dy : dy + h, dx : dx + w]
    return acc / 9.0


def apply_photometric(image: np.ndarray, kind: str, r: float) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.min() < 0.0 or image.max() > 1.0:
        raise ValueError("pixels must lie in [0, 1]")
    if kind == "solarize":
        return np.where(image > r, 1.0 - image, image)
    if kind == "brightness":
        return np.clip(image * (0.5 + r), 0.0, 1.0)
    if kind == "contrast":
        mean = image.mean()
        return np.clip(mean + (0.5 + r) * (image - mean), 0.0, 1.0)
    if kind == "sharpness":
        return np.clip(image + r * (image - _box_blur3(image)), 0.0, 1.0)
    raise ValueError(f"not a photometric transform: {kind!r}")


# --- geometric -------------------------------------------------------------


def affine_matrix(kind: str, magnitude, width: int, height: int) -> np.ndarray:
    """3x3 forward map (source pixel coords -> output pixel coords)."""
    cx, cy = width / 2.0, height / 2.0
    if kind == "scale_jitter":
        f = float(magnitude)
        return np.array([[f, 0, 0], [0, f, 0], [0, 0, 1]], dtype=np.float64)
    if kind == "translate":
        rx, ry = magnitude if isinstance(magnitude, (tuple, list)) else (magnitude, 0.0)
        return np.array([[1, 0, rx * width], [0, 1, ry * height], [0, 0, 1]], dtype=np.float64)
    if kind in ("rotate", "shear"):
        a = math.radians(float(magnitude))
        if kind == "rotate":
            c, s = math.cos(a), math.sin(a)
            lin = np.array([[c, -s], [s, c]])
        else:
            lin = np.array([[1.0, math.tan(a)], [0.0, 1.0]])
        center = np.array([cx, cy])
        m = np.eye(3)
        m[:2, :2] = lin
        m[:2, 2] = center - lin @ center
        return m
    raise ValueError(f"not a geometric transform: {kind!r}")


@functools.lru_cache(maxsize=8)
def _pixel_centers(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    ys, xs = np.mgrid[0:h, 0:w] + 0.5
    ys.flags.writeable = False
    xs.flags.writeable = False
    return ys, xs


def warp_image(image: np.ndarray, m: np.ndarray, fill: np.ndarray | None = None) -> np.ndarray:
    h, w = image.shape[:2]
    if fill is None:
        fill = image.reshape(-1, image.shape[2]).mean(axis=0)
    inv = np.linalg.inv(m)
    ys, xs = _pixel_centers(h, w)
    sx = inv[0, 0] * xs + inv[0, 1] * ys + inv[0, 2]
    sy = inv[1, 0] * xs + inv[1, 1] * ys + inv[1, 2]
    ix = np.floor(sx).astype(np.int64)
    iy = np.floor(sy).astype(np.int64)
    valid = (ix >= 0) & (ix < w) & (iy >= 0) & (iy < h)
    out = np.empty_like(image)
    out[...] = fill
    out[valid] = image[iy[valid], ix[valid]]
    return out


def remap_boxes(boxes: np.ndarray, m: np.ndarray, width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    """Map ``(N, 4)`` boxes through ``m``; returns ``(clipped_boxes, survives)``."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if len(boxes) == 0:
        return boxes.copy(), np.zeros(0, dtype=bool)
    x0, y0, x1, y1 = boxes.T
    cx = np.stack([x0, x1, x1, x0], axis=1)
    cy = np.stack([y0, y0, y1, y1], axis=1)
    tx = m[0, 0] * cx + m[0, 1] * cy + m[0, 2]
    ty = m[1, 0] * cx + m[1, 1] * cy + m[1, 2]
    hull = np.stack([tx.min(1), ty.min(1), tx.max(1), ty.max(1)], axis=1)
    clipped = hull.copy()
    clipped[:, [0, 2]] = np.clip(hull[:, [0, 2]], 0.0, width)
    clipped[:, [1, 3]] = np.clip(hull[:, [1, 3]], 0.0, height)
    hull_area = (hull[:, 2] - hull[:, 0]) * (hull[:, 3] - hull[:, 1])
    cw = clipped[:, 2] - clipped[:, 0]
    ch = clipped[:, 3] - clipped[:, 1]
    clip_area = np.clip(cw, 0, None) * np.clip(ch, 0, None)
    survives = (cw > 0) & (ch > 0) & (clip_area >= MIN_VISIBLE_FRACTION * hull_area) & (clip_area >= MIN_BOX_AREA)
    return clipped, survives


def _rebuild_targets(targets: list[LabeledBox], boxes: np.ndarray, keep: np.ndarray) -> list[LabeledBox]:
    return [replace(t, box=Box.from_array(b)) for t, b, k in zip(targets, boxes, keep) if k]


def apply_geometric(sample: Sample, kind: str, magnitude) -> tuple[Sample, np.ndarray]:
    """Warp image and boxes; returns the new sample and the boolean keep mask."""
    h, w = sample.image.shape[:2]
    m = affine_matrix(kind, magnitude, w, h)
    image = warp_image(np.asarray(sample.image, dtype=np.float64), m)
    boxes = np.array([t.box.as_list() for t in sample.targets]).reshape(-1, 4)
    new_boxes, keep = remap_boxes(boxes, m, w, h)
    return replace(sample, image=image, targets=_rebuild_targets(sample.targets, new_boxes, keep)), keep


def cutout_rects(height: int, width: int, rng: np.random.Generator, ratio_range=(0.05, 0.2)) -> list[tuple[int, int, int, int]]:
    """``k`` in ``{1..5}`` rectangles as ``(x0, y0, x1, y1)`` integer pixel spans."""
    k = int(rng.integers(1, 6))
    side = min(height, width)
    rects = []
    for _ in range(k):
        rw, rh = rng.uniform(*ratio_range, size=2)
        pw = max(1, math.ceil(rw * side))
        ph = max(1, math.ceil(rh * side))
        x0 = int(rng.integers(0, width - pw + 1))
        y0 = int(rng.integers(0, height - ph + 1))
        rects.append((x0, y0, x0 + pw, y0 + ph))
    return rects


def apply_cutout(sample: Sample, rng: np.random.Generator, ratio_range=(0.05, 0.2)) -> tuple[Sample, list]:
    image = np.array(sample.image, dtype=np.float64)
    h, w = image.shape[:2]
    fill = image.reshape(-1, image.shape[2]).mean(axis=0)
    rects = cutout_rects(h, w, rng, ratio_range)
    for x0, y0, x1, y1 in rects:
        image[y0:y1, x0:x1] = fill
    return replace(sample, image=image), rects


def _sample_magnitude(spec: TransformSpec, rng: np.random.Generator):
    lo, hi = spec.magnitude_range
    if spec.kind == "translate":
        r = rng.uniform(lo, hi, size=2) * rng.choice([-1.0, 1.0], size=2)
        return (float(r[0]), float(r[1]))
    value = float(rng.uniform(lo, hi))
    if spec.kind in ("rotate", "shear"):
        value *= float(rng.choice([-1.0, 1.0]))
    return value


def apply_pipeline(
    sample: Sample, pipeline: list[TransformSpec], rng: np.random.Generator
) -> tuple[Sample, AugRecord]:
    strength: Strength = "strong" if any(s.kind in STRONG_ONLY for s in pipeline) else "normal"
    record = AugRecord(strength=strength)
    origin = np.arange(len(sample.targets))
    out = replace(sample, image=np.asarray(sample.image, dtype=np.float64))
    for spec in pipeline:
        if rng.random() >= spec.probability:
            continue
        if spec.kind == "cutout":
            out, rects = apply_cutout(out, rng, spec.magnitude_range)
            record.applied.append(("cutout", [list(r) for r in rects]))
            continue
        mag = _sample_magnitude(spec, rng)
        record.applied.append((spec.kind, mag))
        if spec.kind in PHOTOMETRIC:
            out = replace(out, image=apply_photometric(out.image, spec.kind, mag))
        else:
            out, keep = apply_geometric(out, spec.kind, mag)
            record.dropped.extend(int(i) for i in origin[~keep])
            origin = origin[keep]
    record.kept = [int(i) for i in origin]
    record.dropped.sort()
    return out, record
