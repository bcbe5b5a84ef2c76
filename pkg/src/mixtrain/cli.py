"""Command-line entry points: ``mixtrain {generate,train,evaluate,report}``.

Each invocation writes into its own directory together with a
``manifest.json`` describing what was run. Exit codes: 0 success, 2 bad
arguments or inputs, 3 runtime abort (non-finite loss).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import __version__, detector
from .detector import NonFiniteError
from .mixed_training import CSV_COLUMNS, TrainConfig, evaluate_params, train_loop
from .synthetic_data import NoiseConfig, SceneConfig, load_dataset, make_dataset, save_dataset

log = logging.getLogger("mixtrain")

EXIT_OK, EXIT_BAD_ARGS, EXIT_ABORT = 0, 2, 3
MANIFEST = "manifest.json"


class UsageError(Exception):
    """Invalid arguments or inputs; maps to exit code 2."""


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    started: str
    finished: str | None = None
    artifacts: dict[str, str] = field(default_factory=dict)
    inputs: dict[str, str] = field(default_factory=dict)
    version: str = __version__

    def write(self, run_dir: Path) -> None:
        (run_dir / MANIFEST).write_text(json.dumps(asdict(self), indent=2))

    @classmethod
    def read(cls, run_dir: Path) -> "RunManifest":
        return cls(**json.loads((run_dir / MANIFEST).read_text()))


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def _prepare_dir(path: Path, force: bool, resume: bool = False) -> None:
    if path.exists() and any(path.iterdir()) and not (force or resume):
        raise UsageError(f"{path} exists and is not empty (use --force to overwrite)")
    path.mkdir(parents=True, exist_ok=True)


# --- generate --------------------------------------------------------------


def cmd_generate(args: argparse.Namespace) -> int:
    out = Path(args.out)
    _prepare_dir(out, args.force)
    scene = SceneConfig(image_size=args.image_size, num_categories=args.categories)
    noise = NoiseConfig(p_miss=args.p_miss, sigma_loc=args.sigma_loc, seed=args.seed)
    try:
        scene.validate()
        noise.validate()
    except ValueError as e:
        raise UsageError(str(e)) from e
    started = _now()
    ds = make_dataset(args.count, scene, noise, base_seed=args.seed)
    ann = save_dataset(ds, out)
    noisy, clean = ds.num_boxes()
    RunManifest(
        command="generate",
        config={"count": args.count, "scene": asdict(scene), "noise": asdict(noise)},
        seed=args.seed,
        started=started,
        finished=_now(),
        artifacts={"annotations": ann.name},
    ).write(out)
    dropped = 1 - noisy / clean if clean else 0.0
    print(f"wrote {len(ds)} images to {out} ({clean} objects, {noisy} annotated, drop fraction {dropped:.3f})")
    return EXIT_OK


# --- train -----------------------------------------------------------------

# flag name -> TrainConfig field
_OVERRIDES = {
    "iterations": "total_iterations",
    "batch_size": "batch_size",
    "lr": "lr",
    "seed": "seed",
    "strong_prob": "strong_branch_probability",
    "easy_threshold": "easy_threshold",
    "pseudo_threshold": "pseudo_score_threshold",
    "ema_momentum": "ema_momentum",
    "eval_interval": "eval_interval",
}


def build_config(args: argparse.Namespace) -> TrainConfig:
    base: dict = {}
    if args.config:
        try:
            base = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"cannot read config {args.config}: {e}") from e
    if args.mode:
        base["mode"] = args.mode.replace("-", "_")
    if args.merge_strategy:
        base["merge_strategy"] = args.merge_strategy.replace("-", "_")
    for flag, name in _OVERRIDES.items():
        value = getattr(args, flag)
        if value is not None:
            base[name] = value
    try:
        cfg = TrainConfig.from_dict(base)
        cfg.validate()
    except (TypeError, ValueError) as e:
        raise UsageError(str(e)) from e
    return cfg


def _load(path: str, role: str):
    p = Path(path)
    if not (p / "annotations.json").exists():
        raise UsageError(f"{role} dataset not found at {p} (run `mixtrain generate` first)")
    return load_dataset(p)


def cmd_train(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    out = Path(args.out)
    if args.resume and (out / MANIFEST).exists():
        previous = RunManifest.read(out)
        if previous.config != cfg.to_dict():
            raise UsageError("--resume with a configuration that differs from the run's manifest")
    _prepare_dir(out, args.force, args.resume)
    train = _load(args.train, "training")
    test = _load(args.test, "test")
    manifest = RunManifest(
        command="train",
        config=cfg.to_dict(),
        seed=cfg.seed,
        started=_now(),
        inputs={"train": str(Path(args.train).resolve()), "test": str(Path(args.test).resolve())},
    )
    manifest.write(out)
    try:
        result = train_loop(cfg, train, test, out, resume=args.resume)
    except NonFiniteError as e:
        log.error("training aborted: %s (state dumped to %s)", e, out / "abort_dump.npz")
        manifest.finished = _now()
        manifest.artifacts = {"abort_dump": "abort_dump.npz"}
        manifest.write(out)
        return EXIT_ABORT
    manifest.finished = _now()
    manifest.artifacts = {
        "student": "model.bin",
        "teacher": "model.bin.ema",
        "stats": "stats.csv",
        "evals": "evals.jsonl",
        "state": "state.npz",
    }
    manifest.write(out)
    final = result.evals[-1]
    line = f"final mAP {final['student']['map']:.4f} (student)"
    if "teacher" in final:
        line += f", {final['teacher']['map']:.4f} (teacher)"
    print(line)
    return EXIT_OK


# --- evaluate --------------------------------------------------------------


def cmd_evaluate(args: argparse.Namespace) -> int:
    run = Path(args.run)
    ckpt = run / ("model.bin.ema" if args.use_ema else "model.bin")
    if not ckpt.exists():
        raise UsageError(f"checkpoint {ckpt} not found")
    theta, det_cfg, meta = detector.load_checkpoint(ckpt)
    data = _load(args.data, "evaluation")
    sc = data.scene_cfg
    if (meta["H"], meta["C"]) != (sc.image_size, sc.num_categories):
        raise UsageError(
            f"checkpoint expects {meta['H']}x{meta['W']} images with {meta['C']} categories, "
            f"dataset has {sc.image_size}x{sc.image_size} with {sc.num_categories}"
        )
    result = evaluate_params(theta, data, det_cfg, args.score_threshold, size_breakdown=True)
    out = Path(args.out) if args.out else run
    out.mkdir(parents=True, exist_ok=True)
    which = "teacher" if args.use_ema else "student"
    path = out / f"eval_{Path(args.data).resolve().name}_{which}.json"
    payload = json.loads(result.to_json())
    payload.update(checkpoint=str(ckpt), iteration=meta["iteration"], data=str(Path(args.data).resolve()))
    path.write_text(json.dumps(payload, indent=2))
    print(f"mAP {result.map:.4f}  mAP50 {result.map50:.4f}  mAP75 {result.map75:.4f}  -> {path}")
    return EXIT_OK


# --- report ----------------------------------------------------------------


def _read_stats(run: Path) -> list[dict]:
    path = run / "stats.csv"
    if not path.exists():
        raise UsageError(f"{path} not found")
    with open(path) as f:
        reader = csv.DictReader(f)
        missing = set(CSV_COLUMNS) - set(reader.fieldnames or [])
        if missing:
            raise UsageError(f"{path} lacks columns {sorted(missing)}")
        return list(reader)


def _smooth(values: list[float], window: int) -> list[float]:
    import numpy as np

    if window <= 1 or len(values) < window:
        return values
    kernel = np.ones(window) / window
    return np.convolve(values, kernel, mode="valid").tolist()


def cmd_report(args: argparse.Namespace) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    runs = [Path(r) for r in args.runs]
    out = Path(args.out)
    _prepare_dir(out, args.force)
    tables = {r.name if r.name else str(r): _read_stats(r) for r in runs}

    merged = out / "merged.csv"
    with open(merged, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["run", *CSV_COLUMNS])
        for name, rows in tables.items():
            for row in rows:
                w.writerow([name, *(row[c] for c in CSV_COLUMNS)])

    def series(rows, column, eval_only=False):
        xs, ys = [], []
        for row in rows:
            if row[column] == "" or (eval_only and row["map"] == ""):
                continue
            xs.append(int(row["iteration"]))
            ys.append(float(row[column]))
        return xs, ys

    plots = [
        ("map.svg", "map", "test mAP", True),
        ("n_pseudo.svg", "n_pseudo", "pseudo boxes per iteration", False),
        ("easy_ratio.svg", "easy_ratio", "easy-target proportion", False),
    ]
    for filename, column, ylabel, eval_only in plots:
        fig, ax = plt.subplots(figsize=(6, 4))
        for name, rows in tables.items():
            xs, ys = series(rows, column, eval_only)
            if not eval_only:
                window = max(1, len(ys) // 50)
                ys = _smooth(ys, window)
                xs = xs[window - 1 :] if window > 1 and len(xs) >= window else xs
            ax.plot(xs, ys, label=name, marker="o" if eval_only else None, markersize=3)
        ax.set_xlabel("iteration")
        ax.set_ylabel(ylabel)
        ax.grid(alpha=0.3)
        ax.legend(fontsize=8)
        fig.tight_layout()
        fig.savefig(out / filename, format="svg")
        plt.close(fig)
    print(f"report for {len(runs)} run(s) written to {out}")
    return EXIT_OK


# --- parser ----------------------------------------------------------------


def _probability(text: str) -> float:
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"{text} is not in [0, 1]")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mixtrain", description="Mixed-augmentation self-training for a small grid detector.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="render a synthetic shapes dataset with noisy annotations")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, default=2000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--p-miss", type=_probability, default=0.3, help="probability of dropping each annotation")
    g.add_argument("--sigma-loc", type=float, default=2.0, help="std-dev (px) of corner jitter")
    g.add_argument("--image-size", type=int, default=64)
    g.add_argument("--categories", type=int, default=3)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a detector")
    t.add_argument("--train", required=True, help="dataset directory from `generate`")
    t.add_argument("--test", required=True, help="held-out dataset directory")
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--mode", choices=["sitraining-normal", "sitraining-strong", "mixtraining"])
    t.add_argument("--config", help="JSON file of TrainConfig fields; flags override it")
    t.add_argument("--iterations", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--merge-strategy", choices=["off", "missing", "loc-noise", "hybrid"])
    t.add_argument("--strong-prob", type=_probability)
    t.add_argument("--easy-threshold", type=float)
    t.add_argument("--pseudo-threshold", type=float)
    t.add_argument("--ema-momentum", type=_probability)
    t.add_argument("--eval-interval", type=int)
    t.add_argument("--resume", action="store_true")
    t.add_argument("--force", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="COCO mAP of a run's checkpoint on a dataset")
    e.add_argument("--run", required=True, help="run directory holding model.bin")
    e.add_argument("--data", required=True, help="dataset directory")
    e.add_argument("--use-ema", action="store_true", help="evaluate the EMA teacher checkpoint")
    e.add_argument("--score-threshold", type=float, default=0.05)
    e.add_argument("--out", help="directory for the JSON result (default: the run directory)")
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("report", help="plot and merge the stats of one or more runs")
    r.add_argument("runs", nargs="+")
    r.add_argument("--out", required=True)
    r.add_argument("--force", action="store_true")
    r.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"mixtrain: error: {e}", file=sys.stderr)
        return EXIT_BAD_ARGS


if __name__ == "__main__":
    sys.exit(main())
