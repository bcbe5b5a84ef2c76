"""A tiny single-stage grid detector with hand-written forward/backward.

Architecture (all convolutions 3x3, zero padding 1)::

    image (H, W, 3) -> conv s2 + ReLU -> conv s2 + ReLU -> (S, S, F) -> conv s1 (linear head)

The head emits ``C + 1`` class logits (index ``C`` is background) and four
box deltas per grid cell. Each cell owns one square anchor centred on it.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .box_geometry import Box, ScoredBox, iou_matrix, nms_indices

BACKGROUND = -1
# centred pixels are scaled to roughly unit spread before the first conv
INPUT_SCALE = 1.0
# keeps exp() of the size deltas finite for wildly wrong predictions
MAX_LOG_SCALE = float(np.log(1000.0 / 16.0))


class NonFiniteError(FloatingPointError):
    """Raised when a loss or gradient stops being finite."""


@dataclass(frozen=True)
class DetectorConfig:
    image_size: int = 64
    features: int = 32
    num_classes: int = 3
    anchor_size: float = 16.0
    reg_weight: float = 1.0
    smooth_l1_beta: float = 1.0
    fg_iou: float = 0.5

    @property
    def grid(self) -> int:
        return self.image_size // 4

    @property
    def stride(self) -> float:
        return self.image_size / self.grid

    @property
    def num_outputs(self) -> int:
        return self.num_classes + 1 + 4

    def validate(self) -> None:
        if self.image_size % 4 or self.image_size < 8:
            raise ValueError("image_size must be a multiple of 4 and >= 8")
        if self.num_classes < 1 or self.features < 1:
            raise ValueError("num_classes and features must be positive")


def _shapes(cfg: DetectorConfig) -> list[tuple[str, tuple[int, ...]]]:
    f, o = cfg.features, cfg.num_outputs
    return [
        ("w1", (27, f)),
        ("b1", (f,)),
        ("w2", (9 * f, f)),
        ("b2", (f,)),
        ("wh", (9 * f, o)),
        ("bh", (o,)),
    ]


def num_params(cfg: DetectorConfig) -> int:
    return sum(int(np.prod(s)) for _, s in _shapes(cfg))


def unpack(theta: np.ndarray, cfg: DetectorConfig) -> dict[str, np.ndarray]:
    """Named views into the flat parameter vector."""
    if theta.shape != (num_params(cfg),):
        raise ValueError(f"parameter vector has shape {theta.shape}, expected ({num_params(cfg)},)")
    out, pos = {}, 0
    for name, shape in _shapes(cfg):
        size = int(np.prod(shape))
        out[name] = theta[pos : pos + size].reshape(shape)
        pos += size
    return out


def init_params(
    cfg: DetectorConfig, seed: int = 0, dtype=np.float64, background_prior: float | None = None
) -> np.ndarray:
    """Glorot-uniform weights and zero biases.

    With ``background_prior`` set, the background logit bias starts so that an
    untrained head already assigns that probability to background; this tames
    the first few hundred updates, when nearly every proposal is background.
    """
    cfg.validate()
    rng = np.random.default_rng(seed)
    theta = np.zeros(num_params(cfg))
    views = unpack(theta, cfg)
    for name, shape in _shapes(cfg):
        if name.startswith("w"):
            fan_in, fan_out = shape
            a = np.sqrt(6.0 / (fan_in + fan_out))
            views[name][...] = rng.uniform(-a, a, size=shape)
    if background_prior is not None:
        if not 0.0 < background_prior < 1.0:
            raise ValueError("background_prior must lie in (0, 1)")
        views["bh"][cfg.num_classes] = np.log(background_prior * cfg.num_classes / (1.0 - background_prior))
    return theta.astype(dtype)


def make_anchors(cfg: DetectorConfig) -> np.ndarray:
    """``(S*S, 4)`` anchors, row-major over the grid (index ``i*S + j``)."""
    s, stride, half = cfg.grid, cfg.stride, cfg.anchor_size / 2.0
    centers = (np.arange(s) + 0.5) * stride
    cy, cx = np.meshgrid(centers, centers, indexing="ij")
    cx, cy = cx.ravel(), cy.ravel()
    return np.stack([cx - half, cy - half, cx + half, cy + half], axis=1)


# --- box coding ------------------------------------------------------------


def encode(boxes: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    ax = anchors[:, 0] + 0.5 * aw
    ay = anchors[:, 1] + 0.5 * ah
    gw = boxes[:, 2] - boxes[:, 0]
    gh = boxes[:, 3] - boxes[:, 1]
    gx = boxes[:, 0] + 0.5 * gw
    gy = boxes[:, 1] + 0.5 * gh
    return np.stack([(gx - ax) / aw, (gy - ay) / ah, np.log(gw / aw), np.log(gh / ah)], axis=1)


def decode(deltas: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    ax = anchors[:, 0] + 0.5 * aw
    ay = anchors[:, 1] + 0.5 * ah
    x = ax + deltas[:, 0] * aw
    y = ay + deltas[:, 1] * ah
    w = aw * np.exp(np.minimum(deltas[:, 2], MAX_LOG_SCALE))
    h = ah * np.exp(np.minimum(deltas[:, 3], MAX_LOG_SCALE))
    return np.stack([x - 0.5 * w, y - 0.5 * h, x + 0.5 * w, y + 0.5 * h], axis=1)


# --- forward / backward ----------------------------------------------------


def _patches(x: np.ndarray, stride: int) -> np.ndarray:
    """3x3 same-padded patches: ``(B, H, W, C)`` -> ``(B, Ho, Wo, 9*C)``."""
    b, h, w, c = x.shape
    xp = np.zeros((b, h + 2, w + 2, c), dtype=x.dtype)
    xp[:, 1:-1, 1:-1, :] = x
    ho, wo = (h - 1) // stride + 1, (w - 1) // stride + 1
    cols = np.empty((b, ho, wo, 3, 3, c), dtype=x.dtype)
    for kh in range(3):
        for kw in range(3):
            cols[:, :, :, kh, kw, :] = xp[:, kh : kh + stride * ho : stride, kw : kw + stride * wo : stride, :]
    return cols.reshape(b, ho, wo, 9 * c)


def _patches_backward(dcols: np.ndarray, x_shape: tuple[int, ...], stride: int) -> np.ndarray:
    b, h, w, c = x_shape
    ho, wo = dcols.shape[1:3]
    dcols = dcols.reshape(b, ho, wo, 3, 3, c)
    dxp = np.zeros((b, h + 2, w + 2, c), dtype=dcols.dtype)
    for kh in range(3):
        for kw in range(3):
            dxp[:, kh : kh + stride * ho : stride, kw : kw + stride * wo : stride, :] += dcols[:, :, :, kh, kw, :]
    return dxp[:, 1:-1, 1:-1, :]


@dataclass
class Proposals:
    """Per-image detector output: one proposal per grid cell."""

    anchors: np.ndarray  # (N, 4)
    logits: np.ndarray  # (N, C+1)
    deltas: np.ndarray  # (N, 4)

    def __len__(self) -> int:
        return len(self.anchors)


@dataclass
class ForwardPass:
    """Batched forward result plus the activations backward needs."""

    logits: np.ndarray  # (B, N, C+1)
    deltas: np.ndarray  # (B, N, 4)
    anchors: np.ndarray
    cfg: DetectorConfig
    cache: dict = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return self.logits.shape[0]

    def __getitem__(self, b: int) -> Proposals:
        return Proposals(self.anchors, self.logits[b], self.deltas[b])


def forward(theta: np.ndarray, images: np.ndarray, cfg: DetectorConfig, keep_cache: bool = True) -> ForwardPass:
    images = np.asarray(images, dtype=theta.dtype)
    if images.ndim == 3:
        images = images[None]
    if images.shape[1:] != (cfg.image_size, cfg.image_size, 3):
        raise ValueError(f"image shape {images.shape[1:]} does not match configured {cfg.image_size}x{cfg.image_size}x3")
    p = unpack(theta, cfg)
    x0 = (images - 0.5) * INPUT_SCALE
    cols1 = _patches(x0, 2)
    z1 = cols1 @ p["w1"] + p["b1"]
    a1 = np.maximum(z1, 0.0)
    cols2 = _patches(a1, 2)
    z2 = cols2 @ p["w2"] + p["b2"]
    a2 = np.maximum(z2, 0.0)
    cols3 = _patches(a2, 1)
    out = cols3 @ p["wh"] + p["bh"]
    b, s = out.shape[0], cfg.grid
    out = out.reshape(b, s * s, cfg.num_outputs)
    cache = {}
    if keep_cache:
        cache = {"cols1": cols1, "z1": z1, "cols2": cols2, "z2": z2, "cols3": cols3, "a1_shape": a1.shape, "a2_shape": a2.shape}
    return ForwardPass(
        logits=out[..., : cfg.num_classes + 1],
        deltas=out[..., cfg.num_classes + 1 :],
        anchors=make_anchors(cfg),
        cfg=cfg,
        cache=cache,
    )


def backward(theta: np.ndarray, fp: ForwardPass, dlogits: np.ndarray, ddeltas: np.ndarray) -> np.ndarray:
    """Gradient of the scalar loss w.r.t. ``theta`` given output gradients."""
    if not fp.cache:
        raise ValueError("forward pass was run without keep_cache")
    cfg, c = fp.cfg, fp.cache
    p = unpack(theta, cfg)
    grad = np.zeros_like(theta)
    g = unpack(grad, cfg)
    b, s, f = fp.logits.shape[0], cfg.grid, cfg.features

    dout = np.concatenate([dlogits, ddeltas], axis=-1).reshape(b * s * s, cfg.num_outputs)
    cols3 = c["cols3"].reshape(-1, 9 * f)
    g["wh"][...] = cols3.T @ dout
    g["bh"][...] = dout.sum(axis=0)
    da2 = _patches_backward((dout @ p["wh"].T).reshape(b, s, s, 9 * f), c["a2_shape"], 1)

    dz2 = (da2 * (c["z2"] > 0)).reshape(-1, f)
    g["w2"][...] = c["cols2"].reshape(-1, 9 * f).T @ dz2
    g["b2"][...] = dz2.sum(axis=0)
    da1 = _patches_backward((dz2 @ p["w2"].T).reshape(b, s, s, 9 * f), c["a1_shape"], 2)

    dz1 = (da1 * (c["z1"] > 0)).reshape(-1, f)
    g["w1"][...] = c["cols1"].reshape(-1, 27).T @ dz1
    g["b1"][...] = dz1.sum(axis=0)
    if not np.all(np.isfinite(grad)):
        raise NonFiniteError("non-finite gradient")
    return grad


# --- label assignment and loss ---------------------------------------------


@dataclass
class Assignment:
    target_index: np.ndarray  # (N,) int, BACKGROUND (-1) or target index
    forced: np.ndarray  # (N,) bool, assigned by the best-proposal rule below fg_iou
    weights: np.ndarray  # (T,) per-target loss weights

    @property
    def num_targets(self) -> int:
        return len(self.weights)

    def with_weights(self, weights: Sequence[float]) -> "Assignment":
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != self.weights.shape:
            raise ValueError(f"expected {self.weights.shape[0]} weights, got {weights.shape}")
        return Assignment(self.target_index, self.forced, weights)


def assign_labels(anchors: np.ndarray, target_boxes: np.ndarray, fg_iou: float = 0.5) -> Assignment:
    """Max-IoU assignment with a forced best proposal per target.

    ``anchors`` may also be a :class:`Proposals`; ``target_boxes`` is an
    ``(T, 4)`` array or a list of objects with a ``box`` attribute.
    """
    if isinstance(anchors, Proposals):
        anchors = anchors.anchors
    target_boxes = _as_box_array(target_boxes)
    n, t = len(anchors), len(target_boxes)
    index = np.full(n, BACKGROUND, dtype=np.int64)
    forced = np.zeros(n, dtype=bool)
    if t == 0:
        return Assignment(index, forced, np.ones(0))
    ious = iou_matrix(anchors, target_boxes)  # (N, T)
    best_t = ious.argmax(axis=1)
    best_iou = ious[np.arange(n), best_t]
    fg = best_iou >= fg_iou
    index[fg] = best_t[fg]
    taken = np.zeros(n, dtype=bool)
    for j in range(t):
        # stable sort: highest IoU first, ties -> lowest proposal index
        for i in np.argsort(-ious[:, j], kind="stable"):
            if not taken[i]:
                break
        taken[i] = True
        if index[i] != j:
            index[i] = j
            forced[i] = ious[i, j] < fg_iou
    return Assignment(index, forced, np.ones(t))


def _as_box_array(targets) -> np.ndarray:
    if isinstance(targets, np.ndarray):
        return targets.reshape(-1, 4).astype(np.float64)
    return np.array([t.box.as_list() if hasattr(t, "box") else list(t) for t in targets], dtype=np.float64).reshape(-1, 4)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(_log_softmax(logits))


@dataclass
class LossTerms:
    per_proposal: np.ndarray  # (N,) loss contributed by each proposal
    dlogits: np.ndarray  # (N, C+1)
    ddeltas: np.ndarray  # (N, 4)


def detection_loss(
    proposals: Proposals,
    assignment: Assignment,
    targets,
    categories: Sequence[int] | None = None,
    reg_weight: float = 1.0,
    beta: float = 1.0,
) -> tuple[float, LossTerms]:
    """Weighted detection loss for one image.

    Foreground proposals contribute ``w(g) * (CE + reg_weight * smoothL1)``;
    background proposals contribute their background CE with weight 1.
    """
    logits, deltas = proposals.logits, proposals.deltas
    n, k = logits.shape
    bg_class = k - 1
    boxes = _as_box_array(targets)
    if categories is None:
        categories = [t.category for t in targets]
    categories = np.asarray(categories, dtype=np.int64)

    idx = assignment.target_index
    fg = idx >= 0
    labels = np.full(n, bg_class, dtype=np.int64)
    weights = np.ones(n)
    if fg.any():
        labels[fg] = categories[idx[fg]]
        weights[fg] = assignment.weights[idx[fg]]

    logp = _log_softmax(logits)
    ce = -logp[np.arange(n), labels]
    prob = np.exp(logp)
    dlogits = prob
    dlogits[np.arange(n), labels] -= 1.0
    dlogits *= weights[:, None]
    per = weights * ce

    ddeltas = np.zeros_like(deltas)
    if fg.any():
        tgt = encode(boxes[idx[fg]], proposals.anchors[fg])
        diff = deltas[fg] - tgt
        ad = np.abs(diff)
        sl1 = np.where(ad < beta, 0.5 * diff**2 / beta, ad - 0.5 * beta)
        dsl1 = np.where(ad < beta, diff / beta, np.sign(diff))
        w_fg = weights[fg]
        per[fg] += w_fg * reg_weight * sl1.sum(axis=1)
        ddeltas[fg] = (w_fg * reg_weight)[:, None] * dsl1
    loss = float(per.sum())
    if not np.isfinite(loss):
        raise NonFiniteError("non-finite detection loss")
    return loss, LossTerms(per, dlogits, ddeltas)


# --- optimiser -------------------------------------------------------------


def sgd_step(
    theta: np.ndarray, grad: np.ndarray, velocity: np.ndarray, lr: float, momentum: float
) -> tuple[np.ndarray, np.ndarray]:
    """Heavy-ball SGD: ``v <- momentum*v + grad``; ``theta <- theta - lr*v``."""
    if lr <= 0:
        raise ValueError("lr must be positive")
    if not 0.0 <= momentum < 1.0:
        raise ValueError("momentum must lie in [0, 1)")
    v = momentum * velocity + grad
    return theta - lr * v, v


# --- decoding --------------------------------------------------------------


def decode_arrays(
    proposals: Proposals,
    score_threshold: float,
    nms_threshold: float,
    image_size: float,
    max_detections: int | None = 100,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(boxes, scores, categories)`` after thresholding, clipping and per-class NMS."""
    prob = softmax(proposals.logits)[:, :-1]
    cats = prob.argmax(axis=1)
    scores = prob[np.arange(len(prob)), cats]
    sel = np.flatnonzero(scores > score_threshold)
    if len(sel) == 0:
        return np.zeros((0, 4)), np.zeros(0), np.zeros(0, dtype=np.int64)
    boxes = np.clip(decode(proposals.deltas[sel], proposals.anchors[sel]), 0.0, image_size)
    ok = (boxes[:, 2] - boxes[:, 0] > 1e-6) & (boxes[:, 3] - boxes[:, 1] > 1e-6)
    boxes, scores, cats = boxes[ok], scores[sel][ok], cats[sel][ok]
    keep = nms_indices(boxes, scores, cats, nms_threshold)
    if max_detections is not None:
        keep = keep[:max_detections]
    return boxes[keep], scores[keep], cats[keep]


def decode_detections(
    proposals: Proposals,
    score_threshold: float,
    nms_threshold: float,
    image_size: float = 64.0,
    max_detections: int | None = 100,
) -> list[ScoredBox]:
    boxes, scores, cats = decode_arrays(proposals, score_threshold, nms_threshold, image_size, max_detections)
    return [ScoredBox(Box.from_array(b), float(s), int(c)) for b, s, c in zip(boxes, scores, cats)]


# --- checkpoints -----------------------------------------------------------


def save_checkpoint(path: Path, theta: np.ndarray, cfg: DetectorConfig, iteration: int, extra: dict | None = None) -> None:
    """Little-endian f32 parameter vector plus a JSON sidecar at ``<path>.json``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(np.asarray(theta, dtype="<f4").tobytes())
    sidecar = {
        "S": cfg.grid,
        "F": cfg.features,
        "C": cfg.num_classes,
        "H": cfg.image_size,
        "W": cfg.image_size,
        "iteration": int(iteration),
        "detector": asdict(cfg),
        **(extra or {}),
    }
    Path(f"{path}.json").write_text(json.dumps(sidecar, indent=2))


def load_checkpoint(path: Path) -> tuple[np.ndarray, DetectorConfig, dict]:
    path = Path(path)
    meta = json.loads(Path(f"{path}.json").read_text())
    cfg = DetectorConfig(**meta["detector"])
    theta = np.frombuffer(path.read_bytes(), dtype="<f4").astype(np.float64)
    if theta.shape != (num_params(cfg),):
        raise ValueError(f"checkpoint {path} has {theta.size} values, sidecar implies {num_params(cfg)}")
    return theta, cfg, meta
