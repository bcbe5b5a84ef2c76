"""Training loop for SiTraining baselines and MixTraining.

One iteration over a batch of images:

1. the EMA teacher looks at the raw images (only when its output is needed),
   yielding pseudo boxes and per-target foreground scores from one forward;
2. pseudo boxes are merged into the noisy human annotations;
3. each image independently picks the normal or strong pipeline;
4. the image and its mixed targets are augmented together;
5. on strong images only targets the teacher finds easy keep loss weight 1;
6. label assignment, weighted loss, backward, SGD with momentum;
7. EMA update of the teacher.

All randomness is keyed by ``(seed, stream, iteration, slot)`` so runs are
reproducible and can be resumed exactly.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Literal, Sequence

import numpy as np

from . import detector
from .augmentation import apply_pipeline, build_pipeline
from .detector import DetectorConfig, NonFiniteError
from .ema_teacher import EmaState, TeacherView, ema_update, init_teacher, inspect_batch
from .evaluation import EvalResult, coco_map
from .synthetic_data import Sample, SyntheticDataset
from .target_mixer import merge

log = logging.getLogger(__name__)

Mode = Literal["sitraining_normal", "sitraining_strong", "mixtraining"]
Branch = Literal["normal", "strong"]
MODES = ("sitraining_normal", "sitraining_strong", "mixtraining")
MERGE_STRATEGIES = ("off", "missing", "loc_noise", "hybrid")

CSV_COLUMNS = [
    "iteration",
    "loss",
    "n_pseudo",
    "n_missing_added",
    "n_replaced",
    "easy_ratio",
    "branch",
    "map",
    "map50",
    "map75",
]

# rng stream ids
_ORDER, _AUG, _BRANCH, _TEACHER_SCALE = 0, 1, 2, 3


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "mixtraining"
    total_iterations: int = 12000
    batch_size: int = 4
    lr: float = 0.005
    momentum: float = 0.9
    lr_decay_points: tuple[float, ...] = (2.0 / 3.0, 8.0 / 9.0)
    lr_decay_factor: float = 0.1
    warmup_iterations: int = 500
    grad_clip_norm: float | None = 10.0
    strong_branch_probability: float = 0.5
    easy_threshold: float = 0.9
    pseudo_score_threshold: float = 0.9
    nms_threshold: float = 0.5
    merge_strategy: str = "hybrid"
    # which branches receive pseudo-box mixing: both | normal | strong
    mix_branches: str = "both"
    gate_strong: bool = True
    ema_momentum: float = 0.999
    teacher_scale_jitter: bool = False
    seed: int = 0
    eval_interval: int = 2000
    eval_score_threshold: float = 0.05
    eval_teacher: bool = True
    features: int = 32
    anchor_size: float = 16.0
    reg_weight: float = 1.0
    # initial background probability of the untrained head; None keeps zero biases
    background_prior: float | None = 0.99
    # float32 trains ~2x faster; gradient checks use float64
    dtype: str = "float32"

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.merge_strategy not in MERGE_STRATEGIES:
            raise ValueError(f"unknown merge strategy {self.merge_strategy!r}")
        if self.mix_branches not in ("both", "normal", "strong"):
            raise ValueError(f"unknown mix_branches {self.mix_branches!r}")
        for name in ("easy_threshold", "pseudo_score_threshold"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must lie in (0, 1)")
        if not 0.0 <= self.strong_branch_probability <= 1.0:
            raise ValueError("strong_branch_probability must lie in [0, 1]")
        if self.total_iterations < 0 or self.batch_size < 1 or self.eval_interval < 1:
            raise ValueError("total_iterations >= 0, batch_size >= 1 and eval_interval >= 1 required")
        if self.lr <= 0 or not 0.0 <= self.momentum < 1.0:
            raise ValueError("lr must be positive and momentum in [0, 1)")

    def detector_config(self, image_size: int, num_classes: int) -> DetectorConfig:
        return DetectorConfig(
            image_size=image_size,
            features=self.features,
            num_classes=num_classes,
            anchor_size=self.anchor_size,
            reg_weight=self.reg_weight,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_decay_points"] = list(self.lr_decay_points)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if "lr_decay_points" in d:
            d["lr_decay_points"] = tuple(d["lr_decay_points"])
        return cls(**d)


@dataclass
class IterationStats:
    iteration: int
    loss: float
    n_pseudo: int = 0
    n_missing_added: int = 0
    n_replaced: int = 0
    easy_ratio: float = 0.0
    branch: str = "normal"
    n_background_only: int = 0


@dataclass
class TrainState:
    theta: np.ndarray
    velocity: np.ndarray
    teacher: EmaState
    iteration: int = 0


def lr_at(iteration: int, cfg: TrainConfig) -> float:
    """Linear warmup, then piecewise-constant decay; ``iteration`` is 1-based."""
    n_decays = sum(iteration > p * cfg.total_iterations for p in cfg.lr_decay_points)
    lr = cfg.lr * cfg.lr_decay_factor**n_decays
    if iteration <= cfg.warmup_iterations:
        lr *= iteration / cfg.warmup_iterations
    return lr


def choose_branch(rng: np.random.Generator, strong_probability: float = 0.5) -> Branch:
    return "strong" if rng.random() < strong_probability else "normal"


def target_weights(targets: Sequence, scores: Sequence[float], branch: Branch, easy_threshold: float = 0.9) -> np.ndarray:
    """Loss weight per target: 1 on normal images, easy-only on strong ones."""
    scores = np.asarray(scores, dtype=np.float64)
    if len(scores) != len(targets):
        raise ValueError(f"{len(targets)} targets but {len(scores)} scores")
    if branch == "normal":
        return np.ones(len(targets))
    return (scores > easy_threshold).astype(np.float64)


def _rng(seed: int, stream: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream, *keys])


def batch_indices(iteration: int, batch_size: int, n: int, seed: int) -> list[int]:
    """Indices for 1-based ``iteration``; walks seeded per-epoch permutations."""
    start = (iteration - 1) * batch_size
    out = []
    perm_epoch, perm = -1, None
    for k in range(start, start + batch_size):
        epoch, pos = divmod(k, n)
        if epoch != perm_epoch:
            perm = _rng(seed, _ORDER, epoch).permutation(n)
            perm_epoch = epoch
        out.append(int(perm[pos]))
    return out


class Trainer:
    """Holds the configuration, data and mutable state of one run."""

    def __init__(self, cfg: TrainConfig, train: SyntheticDataset, state: TrainState | None = None):
        cfg.validate()
        self.cfg = cfg
        self.train = train
        sc = train.scene_cfg
        self.det_cfg = cfg.detector_config(sc.image_size, sc.num_categories)
        self.anchors = detector.make_anchors(self.det_cfg)
        self.pipelines = {"normal": build_pipeline("normal"), "strong": build_pipeline("strong")}
        if state is None:
            theta = detector.init_params(
                self.det_cfg, seed=cfg.seed, dtype=np.dtype(cfg.dtype), background_prior=cfg.background_prior
            )
            state = TrainState(theta, np.zeros_like(theta), init_teacher(theta, cfg.ema_momentum), 0)
        self.state = state

    # -- per-image decisions ------------------------------------------------

    def _branch(self, t: int, slot: int) -> Branch:
        mode = self.cfg.mode
        if mode == "sitraining_normal":
            return "normal"
        if mode == "sitraining_strong":
            return "strong"
        return choose_branch(_rng(self.cfg.seed, _BRANCH, t, slot), self.cfg.strong_branch_probability)

    def _mixing_on(self, branch: Branch) -> bool:
        cfg = self.cfg
        if cfg.mode != "mixtraining" or cfg.merge_strategy == "off":
            return False
        return cfg.mix_branches == "both" or cfg.mix_branches == branch

    def _gating_on(self, branch: Branch) -> bool:
        return self.cfg.mode == "mixtraining" and self.cfg.gate_strong and branch == "strong"

    def _teacher_views(self, t: int, samples: Sequence[Sample], needs: Sequence[bool]) -> list[TeacherView | None]:
        views: list[TeacherView | None] = [None] * len(samples)
        idx = [i for i, need in enumerate(needs) if need]
        if not idx:
            return views
        scales = None
        if self.cfg.teacher_scale_jitter:
            scales = [float(_rng(self.cfg.seed, _TEACHER_SCALE, t, i).uniform(0.5, 1.5)) for i in idx]
        images = np.stack([samples[i].image for i in idx])
        for i, v in zip(idx, inspect_batch(self.state.teacher, images, self.det_cfg, scales)):
            views[i] = v
        return views

    # -- one optimisation step ----------------------------------------------

    def step(self, samples: Sequence[Sample] | None = None) -> IterationStats:
        cfg, st = self.cfg, self.state
        t = st.iteration + 1
        if samples is None:
            samples = [self.train[i] for i in batch_indices(t, cfg.batch_size, len(self.train), cfg.seed)]
        branches = [self._branch(t, i) for i in range(len(samples))]
        needs = [self._mixing_on(b) or self._gating_on(b) for b in branches]
        views = self._teacher_views(t, samples, needs)

        stats = IterationStats(iteration=t, loss=0.0)
        n_scored = n_easy = 0
        images, batch_targets, batch_weights = [], [], []
        for slot, (sample, branch, view) in enumerate(zip(samples, branches, views)):
            targets = list(sample.targets)
            if view is not None and self._mixing_on(branch):
                pseudo = view.pseudo_boxes(cfg.pseudo_score_threshold, cfg.nms_threshold)
                mix = merge(targets, pseudo, cfg.merge_strategy)
                targets = mix.targets
                stats.n_pseudo += len(pseudo)
                stats.n_missing_added += mix.n_added
                stats.n_replaced += mix.n_replaced
            weights = np.ones(len(targets))
            if view is not None:
                scores = view.scores(targets)
                n_scored += len(scores)
                n_easy += int((scores > cfg.easy_threshold).sum())
                if self._gating_on(branch):
                    weights = target_weights(targets, scores, branch, cfg.easy_threshold)
            aug, record = apply_pipeline(
                replace(sample, targets=targets), self.pipelines[branch], _rng(cfg.seed, _AUG, t, slot)
            )
            if not aug.targets and targets:
                stats.n_background_only += 1
            images.append(aug.image)
            batch_targets.append(aug.targets)
            batch_weights.append(weights[record.kept])

        n_strong = sum(b == "strong" for b in branches)
        stats.branch = "strong" if n_strong == len(branches) else "normal" if n_strong == 0 else "mixed"
        stats.easy_ratio = n_easy / n_scored if n_scored else 0.0

        fp = detector.forward(st.theta, np.stack(images), self.det_cfg)
        dlogits = np.zeros_like(fp.logits)
        ddeltas = np.zeros_like(fp.deltas)
        total = 0.0
        b = len(images)
        for i, (targets, weights) in enumerate(zip(batch_targets, batch_weights)):
            assignment = detector.assign_labels(self.anchors, targets, self.det_cfg.fg_iou).with_weights(weights)
            loss, terms = detector.detection_loss(fp[i], assignment, targets, reg_weight=self.det_cfg.reg_weight)
            total += loss
            dlogits[i] = terms.dlogits / b
            ddeltas[i] = terms.ddeltas / b
        stats.loss = total / b
        if not np.isfinite(stats.loss):
            raise NonFiniteError(f"non-finite loss at iteration {t}")
        grad = detector.backward(st.theta, fp, dlogits, ddeltas)
        if cfg.grad_clip_norm is not None:
            norm = float(np.linalg.norm(grad))
            if norm > cfg.grad_clip_norm:
                grad = grad * (cfg.grad_clip_norm / norm)
        theta, velocity = detector.sgd_step(st.theta, grad, st.velocity, lr_at(t, cfg), cfg.momentum)
        self.state = TrainState(theta, velocity, ema_update(st.teacher, theta), t)
        return stats


def evaluate_params(
    theta: np.ndarray,
    dataset: SyntheticDataset,
    det_cfg: DetectorConfig,
    score_threshold: float = 0.05,
    nms_threshold: float = 0.5,
    chunk: int = 100,
    size_breakdown: bool = False,
) -> EvalResult:
    """mAP of ``theta`` on ``dataset`` against its clean annotations."""
    dets = []
    for start in range(0, len(dataset), chunk):
        idx = range(start, min(start + chunk, len(dataset)))
        fp = detector.forward(theta, dataset.images(idx), det_cfg, keep_cache=False)
        for b in range(len(fp)):
            dets.append(detector.decode_detections(fp[b], score_threshold, nms_threshold, det_cfg.image_size))
    gts = [s.clean if s.clean is not None else s.targets for s in dataset]
    return coco_map(dets, gts, det_cfg.num_classes, det_cfg.image_size, size_breakdown=size_breakdown)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def stats_row(s: IterationStats | None, iteration: int, ev: EvalResult | None) -> list[str]:
    row = [str(iteration)]
    if s is None:
        row += [""] * 6
    else:
        row += [_fmt(s.loss), str(s.n_pseudo), str(s.n_missing_added), str(s.n_replaced), _fmt(s.easy_ratio), s.branch]
    if ev is None:
        row += ["", "", ""]
    else:
        row += [_fmt(ev.map), _fmt(ev.map50), _fmt(ev.map75)]
    return row


@dataclass
class TrainResult:
    state: TrainState
    stats: list[IterationStats] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)
    det_cfg: DetectorConfig | None = None

    def final_map(self, which: str = "student") -> float:
        return self.evals[-1][which]["map"]

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        ev_by_iter = {e["iteration"]: e for e in self.evals}
        by_iter = {s.iteration: s for s in self.stats}
        iters = sorted(set(by_iter) | set(ev_by_iter))
        for t in iters:
            ev = ev_by_iter.get(t)
            er = EvalResult(**{k: ev["student"][k] for k in ("map", "map50", "map75")}) if ev else None
            w.writerow(stats_row(by_iter.get(t), t, er))
        return buf.getvalue()


def save_state(path: Path, state: TrainState) -> None:
    np.savez(
        path,
        theta=state.theta,
        velocity=state.velocity,
        teacher=state.teacher.params,
        momentum=state.teacher.momentum,
        update_count=state.teacher.update_count,
        iteration=state.iteration,
    )


def load_state(path: Path) -> TrainState:
    z = np.load(path)
    teacher = EmaState(z["teacher"], float(z["momentum"]), int(z["update_count"]))
    return TrainState(z["theta"], z["velocity"], teacher, int(z["iteration"]))


def _eval_record(trainer: Trainer, test: SyntheticDataset, iteration: int) -> dict:
    cfg = trainer.cfg
    rec = {"iteration": iteration}
    student = evaluate_params(trainer.state.theta, test, trainer.det_cfg, cfg.eval_score_threshold, cfg.nms_threshold)
    rec["student"] = json.loads(student.to_json())
    if cfg.eval_teacher:
        teacher = evaluate_params(trainer.state.teacher.params, test, trainer.det_cfg, cfg.eval_score_threshold, cfg.nms_threshold)
        rec["teacher"] = json.loads(teacher.to_json())
    return rec


def train_loop(
    cfg: TrainConfig,
    train: SyntheticDataset,
    test: SyntheticDataset,
    out_dir: Path | None = None,
    resume: bool = False,
    stop_at: int | None = None,
) -> TrainResult:
    """Run ``cfg.total_iterations`` steps with periodic evaluation.

    With ``out_dir`` the run writes ``stats.csv``, ``evals.jsonl``, student
    and teacher checkpoints and a resumable ``state.npz``. ``stop_at`` halts
    early (after a checkpoint) without changing the schedule, so a later
    ``resume=True`` call continues the same run.
    """
    cfg.validate()
    out = Path(out_dir) if out_dir is not None else None
    state = None
    prior_stats: list[IterationStats] = []
    prior_evals: list[dict] = []
    if resume and out is not None and (out / "state.npz").exists():
        state = load_state(out / "state.npz")
        prior_stats, prior_evals = _read_progress(out, state.iteration)
    trainer = Trainer(cfg, train, state)
    result = TrainResult(trainer.state, prior_stats, prior_evals, trainer.det_cfg)

    def checkpoint():
        if out is None:
            return
        it = trainer.state.iteration
        detector.save_checkpoint(out / "model.bin", trainer.state.theta, trainer.det_cfg, it)
        detector.save_checkpoint(out / "model.bin.ema", trainer.state.teacher.params, trainer.det_cfg, it)
        save_state(out / "state.npz", trainer.state)
        (out / "stats.csv").write_text(result.csv_text())
        with open(out / "evals.jsonl", "w") as f:
            for e in result.evals:
                f.write(json.dumps(e) + "\n")

    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    if not result.evals:
        result.evals.append(_eval_record(trainer, test, 0))
        checkpoint()

    end = cfg.total_iterations if stop_at is None else min(stop_at, cfg.total_iterations)
    while trainer.state.iteration < end:
        try:
            s = trainer.step()
        except NonFiniteError:
            if out is not None:
                np.savez(out / "abort_dump.npz", theta=trainer.state.theta, velocity=trainer.state.velocity)
            raise
        result.stats.append(s)
        t = trainer.state.iteration
        if t % cfg.eval_interval == 0 or t == cfg.total_iterations or t == end:
            result.evals.append(_eval_record(trainer, test, t))
            log.info("iter %d loss %.3f map %.4f", t, s.loss, result.evals[-1]["student"]["map"])
            result.state = trainer.state
            checkpoint()
    result.state = trainer.state
    return result


def _read_progress(out: Path, upto: int) -> tuple[list[IterationStats], list[dict]]:
    stats, evals = [], []
    with open(out / "stats.csv") as f:
        for row in csv.DictReader(f):
            t = int(row["iteration"])
            if t > upto or row["loss"] == "":
                continue
            stats.append(
                IterationStats(
                    iteration=t,
                    loss=float(row["loss"]),
                    n_pseudo=int(row["n_pseudo"]),
                    n_missing_added=int(row["n_missing_added"]),
                    n_replaced=int(row["n_replaced"]),
                    easy_ratio=float(row["easy_ratio"]),
                    branch=row["branch"],
                )
            )
    with open(out / "evals.jsonl") as f:
        evals = [e for e in map(json.loads, f) if e["iteration"] <= upto]
    return stats, evals
