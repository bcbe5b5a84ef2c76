"""Colored-shapes detection scenes with controllable annotation noise.

Every sample carries two annotation sets: ``clean`` (the exact tight boxes of
the rendered shapes, used for evaluation) and ``targets`` (the possibly
corrupted human annotations the detector is trained on).
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator, Literal, Sequence

import numpy as np

from .box_geometry import Box, iou_matrix

Provenance = Literal["human", "pseudo"]

SHAPE_KINDS = ("rectangle", "disk", "triangle")


@dataclass(frozen=True)
class LabeledBox:
    box: Box
    category: int
    provenance: Provenance = "human"
    score: float | None = None

    def __post_init__(self) -> None:
        if self.provenance not in ("human", "pseudo"):
            raise ValueError(f"unknown provenance {self.provenance!r}")
        if self.provenance == "pseudo" and self.score is None:
            raise ValueError("pseudo boxes must carry a score")
        if self.score is not None and not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score outside [0, 1]: {self.score}")

    def as_row(self) -> list[float]:
        return [*self.box.as_list(), self.category]


@dataclass
class Sample:
    image: np.ndarray
    targets: list[LabeledBox]
    id: int = 0
    clean: list[LabeledBox] | None = None
    # per-target binary masks, only kept by render_scene for verification
    masks: list[np.ndarray] | None = field(default=None, repr=False)

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]


@dataclass(frozen=True)
class SceneConfig:
    image_size: int = 64
    shapes_per_image: tuple[int, int] = (1, 4)
    num_categories: int = 3
    size_range: tuple[float, float] = (8.0, 22.0)
    max_overlap_iou: float = 0.4
    pixel_noise: float = 0.02

    def validate(self) -> None:
        if self.image_size < 32:
            raise ValueError("image_size must be at least 32")
        if not 2 <= self.num_categories <= len(SHAPE_KINDS):
            raise ValueError(f"num_categories must lie in [2, {len(SHAPE_KINDS)}]")
        lo, hi = self.size_range
        if lo < 4:
            raise ValueError("minimum shape size must be at least 4 px")
        if hi < lo or hi > self.image_size:
            raise ValueError(f"bad size_range {self.size_range}")
        a, b = self.shapes_per_image
        if not 1 <= a <= b:
            raise ValueError(f"bad shapes_per_image {self.shapes_per_image}")


@dataclass(frozen=True)
class NoiseConfig:
    p_miss: float = 0.3
    sigma_loc: float = 2.0
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 <= self.p_miss <= 1.0:
            raise ValueError("p_miss must lie in [0, 1]")
        if self.sigma_loc < 0:
            raise ValueError("sigma_loc must be non-negative")


def sample_seed(base_seed: int, index: int) -> int:
    """Stable per-sample seed derived from ``(base_seed, index)``."""
    return int(np.random.SeedSequence([base_seed, index]).generate_state(1)[0])


def _shape_mask(kind: str, cx: float, cy: float, w: float, h: float, n: int, rng) -> np.ndarray:
    ys, xs = np.mgrid[0:n, 0:n] + 0.5
    if kind == "rectangle":
        return (np.abs(xs - cx) <= w / 2) & (np.abs(ys - cy) <= h / 2)
    if kind == "disk":
        return ((xs - cx) / (w / 2)) ** 2 + ((ys - cy) / (h / 2)) ** 2 <= 1.0
    # triangle: apex on the top edge, base on the bottom edge
    apex = cx + rng.uniform(-0.3, 0.3) * w
    top, bottom = cy - h / 2, cy + h / 2
    t = (ys - top) / h
    left = apex + t * (cx - w / 2 - apex)
    right = apex + t * (cx + w / 2 - apex)
    return (ys >= top) & (ys <= bottom) & (xs >= left) & (xs <= right)


def _tight_box(mask: np.ndarray) -> Box | None:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if len(rows) == 0:
        return None
    return Box(float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1))


def render_scene(rng_seed: int, scene_cfg: SceneConfig = SceneConfig(), keep_masks: bool = False) -> Sample:
    """Render one scene; targets are the tight pixel boxes of each shape mask."""
    scene_cfg.validate()
    rng = np.random.default_rng(rng_seed)
    n = scene_cfg.image_size
    lo_n, hi_n = scene_cfg.shapes_per_image
    count = int(rng.integers(lo_n, hi_n + 1))

    background = rng.uniform(0.0, 0.35, size=3)
    image = np.broadcast_to(background, (n, n, 3)).copy()
    targets: list[LabeledBox] = []
    masks: list[np.ndarray] = []
    boxes: list[list[float]] = []
    attempts = 0
    while len(targets) < count and attempts < 200:
        attempts += 1
        category = int(rng.integers(scene_cfg.num_categories))
        w, h = rng.uniform(*scene_cfg.size_range, size=2)
        cx = rng.uniform(w / 2, n - w / 2)
        cy = rng.uniform(h / 2, n - h / 2)
        mask = _shape_mask(SHAPE_KINDS[category], cx, cy, w, h, n, rng)
        box = _tight_box(mask)
        if box is None or box.width < 4 or box.height < 4:
            continue
        if boxes and iou_matrix([box.as_list()], boxes).max() > scene_cfg.max_overlap_iou:
            continue
        color = rng.uniform(0.45, 1.0, size=3)
        image[mask] = color
        boxes.append(box.as_list())
        masks.append(mask)
        targets.append(LabeledBox(box, category, "human"))

    if scene_cfg.pixel_noise > 0:
        image = image + rng.normal(0.0, scene_cfg.pixel_noise, size=image.shape)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return Sample(
        image=image,
        targets=targets,
        id=0,
        clean=list(targets),
        masks=masks if keep_masks else None,
    )


def _jitter_box(box: Box, sigma: float, width: int, height: int, rng, max_tries: int = 50) -> Box:
    if sigma == 0:
        return box
    base = box.as_array()
    limits = np.array([width, height, width, height], dtype=np.float64)
    for _ in range(max_tries):
        cand = np.clip(base + rng.normal(0.0, sigma, size=4), 0.0, limits)
        if cand[0] < cand[2] and cand[1] < cand[3]:
            return Box.from_array(cand)
    return box


def corrupt_annotations(s: Sample, n: NoiseConfig) -> Sample:
    """Drop each target with probability ``p_miss`` and jitter the survivors' corners."""
    n.validate()
    if any(t.provenance != "human" for t in s.targets):
        raise ValueError("corrupt_annotations expects human annotations only")
    rng = np.random.default_rng(sample_seed(n.seed, s.id))
    clean = list(s.clean) if s.clean is not None else list(s.targets)
    keep = rng.random(len(s.targets)) >= n.p_miss
    noisy = []
    for t, k in zip(s.targets, keep):
        if not k:
            continue
        box = _jitter_box(t.box, n.sigma_loc, s.width, s.height, rng)
        noisy.append(replace(t, box=box))
    return replace(s, targets=noisy, clean=clean)


class SyntheticDataset(Sequence[Sample]):
    """Immutable, indexable collection of noisy/clean samples."""

    def __init__(self, samples: list[Sample], scene_cfg: SceneConfig, noise_cfg: NoiseConfig, base_seed: int):
        self._samples = samples
        self.scene_cfg = scene_cfg
        self.noise_cfg = noise_cfg
        self.base_seed = base_seed

    def __len__(self) -> int:
        return len(self._samples)

    def __getitem__(self, i):  # type: ignore[override]
        return self._samples[i]

    def __iter__(self) -> Iterator[Sample]:
        return iter(self._samples)

    def images(self, indices: Sequence[int] | None = None) -> np.ndarray:
        idx = range(len(self)) if indices is None else indices
        return np.stack([self._samples[i].image for i in idx])

    def num_boxes(self) -> tuple[int, int]:
        """``(noisy, clean)`` annotation totals."""
        noisy = sum(len(s.targets) for s in self._samples)
        clean = sum(len(s.clean or ()) for s in self._samples)
        return noisy, clean


def make_dataset(
    count: int,
    scene_cfg: SceneConfig = SceneConfig(),
    noise_cfg: NoiseConfig = NoiseConfig(),
    base_seed: int = 0,
) -> SyntheticDataset:
    if count < 1:
        raise ValueError("count must be >= 1")
    samples = []
    for i in range(count):
        s = render_scene(sample_seed(base_seed, i), scene_cfg)
        s.id = i
        samples.append(corrupt_annotations(s, noise_cfg))
    return SyntheticDataset(samples, scene_cfg, noise_cfg, base_seed)


# --- on-disk format -------------------------------------------------------

_HEADER = struct.Struct("<III")


def write_raster(path: Path, image: np.ndarray) -> None:
    h, w, c = image.shape
    with open(path, "wb") as f:
        f.write(_HEADER.pack(h, w, c))
        f.write(np.ascontiguousarray(image, dtype="<f4").tobytes())


def read_raster(path: Path) -> np.ndarray:
    data = Path(path).read_bytes()
    h, w, c = _HEADER.unpack_from(data)
    pixels = np.frombuffer(data, dtype="<f4", offset=_HEADER.size, count=h * w * c)
    return pixels.reshape(h, w, c).astype(np.float32)


def _rows_to_boxes(rows) -> list[LabeledBox]:
    return [LabeledBox(Box.from_array(r[:4]), int(r[4]), "human") for r in rows]


def save_dataset(ds: SyntheticDataset, out_dir: Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for s in ds:
        name = f"{s.id:06d}.raw"
        write_raster(out_dir / name, s.image)
        records.append(
            {
                "id": s.id,
                "file": name,
                "noisy": [t.as_row() for t in s.targets],
                "clean": [t.as_row() for t in (s.clean or [])],
            }
        )
    meta = {
        "base_seed": ds.base_seed,
        "scene": asdict(ds.scene_cfg),
        "noise": asdict(ds.noise_cfg),
        "samples": records,
    }
    path = out_dir / "annotations.json"
    path.write_text(json.dumps(meta))
    return path


def load_dataset(in_dir: Path) -> SyntheticDataset:
    in_dir = Path(in_dir)
    meta = json.loads((in_dir / "annotations.json").read_text())
    scene = meta["scene"]
    scene_cfg = SceneConfig(
        **{**scene, "shapes_per_image": tuple(scene["shapes_per_image"]), "size_range": tuple(scene["size_range"])}
    )
    noise_cfg = NoiseConfig(**meta["noise"])
    samples = [
        Sample(
            image=read_raster(in_dir / rec["file"]),
            targets=_rows_to_boxes(rec["noisy"]),
            id=int(rec["id"]),
            clean=_rows_to_boxes(rec["clean"]),
        )
        for rec in meta["samples"]
    ]
    return SyntheticDataset(samples, scene_cfg, noise_cfg, int(meta["base_seed"]))
