import csv
import json

import pytest

from mixtrain import cli


@pytest.fixture(scope="module")
def datasets(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    assert cli.main(["generate", "--out", str(root / "train"), "--count", "12", "--seed", "1"]) == 0
    assert cli.main(["generate", "--out", str(root / "test"), "--count", "4", "--seed", "2"]) == 0
    return root / "train", root / "test"


def _train(datasets, out, *extra):
    train, test = datasets
    args = ["train", "--train", str(train), "--test", str(test), "--out", str(out)]
    args += ["--iterations", "4", "--batch-size", "2", "--eval-interval", "2", *extra]
    return cli.main(args)


def test_generate_writes_dataset_and_manifest(datasets):
    train, _ = datasets
    ann = json.loads((train / "annotations.json").read_text())
    assert len(ann["samples"]) == 12
    manifest = json.loads((train / "manifest.json").read_text())
    assert manifest["command"] == "generate" and manifest["seed"] == 1
    assert manifest["config"]["noise"]["p_miss"] == 0.3


def test_generate_refuses_non_empty_dir_without_force(datasets, capsys):
    train, _ = datasets
    assert cli.main(["generate", "--out", str(train), "--count", "2"]) == 2
    assert "--force" in capsys.readouterr().err


def test_generate_rejects_bad_probability():
    with pytest.raises(SystemExit) as e:
        cli.main(["generate", "--out", "x", "--p-miss", "1.5"])
    assert e.value.code == 2


def test_train_evaluate_report_roundtrip(datasets, tmp_path):
    run = tmp_path / "run"
    assert _train(datasets, run, "--mode", "mixtraining", "--merge-strategy", "loc-noise") == 0
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["config"]["mode"] == "mixtraining"
    assert manifest["config"]["merge_strategy"] == "loc_noise"
    assert manifest["finished"] is not None
    for name in manifest["artifacts"].values():
        assert (run / name).exists()

    _, test = datasets
    assert cli.main(["evaluate", "--run", str(run), "--data", str(test), "--use-ema"]) == 0
    result = json.loads((run / "eval_test_teacher.json").read_text())
    assert 0.0 <= result["map"] <= 1.0 and result["iteration"] == 4
    assert "map_small" in result

    rep = tmp_path / "rep"
    assert cli.main(["report", str(run), "--out", str(rep)]) == 0
    for name in ("map.svg", "n_pseudo.svg", "easy_ratio.svg"):
        assert (rep / name).read_text().lstrip().startswith("<?xml")
    with open(rep / "merged.csv") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 5 and {r["run"] for r in rows} == {"run"}


def test_config_file_with_flag_override(datasets, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"mode": "sitraining_strong", "lr": 0.001, "features": 8}))
    run = tmp_path / "run"
    assert _train(datasets, run, "--config", str(cfg), "--lr", "0.002") == 0
    saved = json.loads((run / "manifest.json").read_text())["config"]
    assert (saved["mode"], saved["lr"], saved["features"]) == ("sitraining_strong", 0.002, 8)


def test_unknown_config_field_is_usage_error(datasets, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"learning_rate": 0.1}))
    assert _train(datasets, tmp_path / "run", "--config", str(cfg)) == 2


def test_resume_requires_matching_config(datasets, tmp_path):
    run = tmp_path / "run"
    assert _train(datasets, run) == 0
    assert _train(datasets, run, "--resume") == 0
    assert _train(datasets, run, "--resume", "--lr", "0.01") == 2
    assert _train(datasets, run) == 2  # non-empty without --force


def test_missing_dataset_is_usage_error(tmp_path, capsys):
    args = ["train", "--train", str(tmp_path / "nope"), "--test", str(tmp_path / "nope"), "--out", str(tmp_path / "r")]
    assert cli.main(args) == 2
    assert "mixtrain generate" in capsys.readouterr().err


def test_evaluate_rejects_shape_mismatch(datasets, tmp_path):
    run = tmp_path / "run"
    assert _train(datasets, run) == 0
    other = tmp_path / "big"
    assert cli.main(["generate", "--out", str(other), "--count", "2", "--image-size", "96"]) == 0
    assert cli.main(["evaluate", "--run", str(run), "--data", str(other)]) == 2


def test_non_finite_loss_exits_3(datasets, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"grad_clip_norm": None, "warmup_iterations": 0, "features": 8}))
    run = tmp_path / "run"
    with pytest.warns(RuntimeWarning):
        code = _train(datasets, run, "--config", str(cfg), "--lr", "1e30")
    assert code == 3
    assert (run / "abort_dump.npz").exists()


def test_report_rejects_missing_stats(tmp_path):
    (tmp_path / "empty").mkdir()
    assert cli.main(["report", str(tmp_path / "empty"), "--out", str(tmp_path / "rep")]) == 2
