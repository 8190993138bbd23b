import csv
import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from hetcd.cli import main

from conftest import FAST_CAE

CAE_FLAGS = [
    "--epochs", str(FAST_CAE.epochs),
    "--batches-per-epoch", str(FAST_CAE.batches_per_epoch),
    "--hidden-channels", str(FAST_CAE.hidden_channels),
]  # fmt: skip


def _digest(directory: Path) -> dict:
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(directory.iterdir()) if p.is_file()}


def _metrics_row(path: Path) -> dict:
    with open(path) as fh:
        return next(csv.DictReader(fh))


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    d = {k: root / k for k in ("bundle", "cae", "tr", "occ", "pred", "eval")}
    assert main(["synth", "--seed", "0", "--out", str(d["bundle"])]) == 0
    bundle_digest = _digest(d["bundle"])
    assert main(["train-cae", "--bundle", str(d["bundle"]), "--out", str(d["cae"]), *CAE_FLAGS]) == 0
    assert main(["translate", "--bundle", str(d["bundle"]), "--cae", str(d["cae"]), "--out", str(d["tr"])]) == 0
    occ = ["train-occ", "--bundle", str(d["bundle"]), "--translation", str(d["tr"])]
    assert main([*occ, "--npos", "500", "--seed", "1", "--out", str(d["occ"])]) == 0
    pred = ["predict", "--bundle", str(d["bundle"]), "--translation", str(d["tr"]), "--model", str(d["occ"])]
    assert main([*pred, "--out", str(d["pred"])]) == 0
    assert main(["eval", "--bundle", str(d["bundle"]), "--prediction", str(d["pred"]), "--out", str(d["eval"])]) == 0
    d["bundle_digest"] = bundle_digest
    return d


def test_unknown_flag_is_usage_error(capsys):
    assert main(["--bogus"]) == 2
    assert "usage" in capsys.readouterr().err
    assert main(["synth", "--bogus", "--out", "x"]) == 2
    assert main(["frobnicate"]) == 2


def test_missing_out_and_bad_values(tmp_path, capsys):
    assert main(["synth"]) == 2
    assert main(["train-occ", "--bundle", str(tmp_path), "--translation", str(tmp_path), "--threshold", "1.0", "--out", str(tmp_path / "o")]) == 2
    assert main(["train-occ", "--variant", "sideways", "--out", str(tmp_path)]) == 2
    assert main(["translate", "--bundle", str(tmp_path / "nope"), "--cae", str(tmp_path), "--out", str(tmp_path / "o")]) == 2
    assert "does not exist" in capsys.readouterr().err


def test_synth_is_byte_identical(tmp_path):
    assert main(["synth", "--seed", "7", "--height", "40", "--width", "40", "--out", str(tmp_path / "a")]) == 0
    assert main(["synth", "--seed", "7", "--height", "40", "--width", "40", "--out", str(tmp_path / "b")]) == 0
    assert _digest(tmp_path / "a") == _digest(tmp_path / "b")


def test_config_file_and_flag_override(tmp_path):
    cfg = tmp_path / "run.toml"
    cfg.write_text('seed = 3\n[synth]\nheight = 36\nwidth = 44\n')
    assert main(["synth", "--config", str(cfg), "--width", "40", "--out", str(tmp_path / "o")]) == 0
    run = json.loads((tmp_path / "o" / "run.json").read_text())
    assert run["config"]["seed"] == 3 and run["config"]["height"] == 36 and run["config"]["width"] == 40
    manifest = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert (manifest["t1"]["height"], manifest["t1"]["width"]) == (36, 40)


def test_unknown_config_key(tmp_path):
    cfg = tmp_path / "bad.toml"
    cfg.write_text("colour = 'blue'\n")
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2


def test_rerun_from_run_json(tmp_path):
    assert main(["synth", "--seed", "5", "--height", "40", "--width", "48", "--out", str(tmp_path / "a")]) == 0
    assert main(["synth", "--config", str(tmp_path / "a" / "run.json"), "--out", str(tmp_path / "b")]) == 0
    assert _digest(tmp_path / "a") == _digest(tmp_path / "b")


def test_runtime_failure_exit_code(pipeline, tmp_path, capsys):
    args = ["train-occ", "--bundle", str(pipeline["bundle"]), "--translation", str(pipeline["tr"])]
    assert main([*args, "--npos", "999999", "--out", str(tmp_path / "o")]) == 1
    assert "exceeds" in capsys.readouterr().err


def test_pipeline_outputs(pipeline):
    for key in ("bundle", "cae", "tr", "occ", "pred", "eval"):
        assert (pipeline[key] / "run.json").is_file()
    assert (pipeline["occ"] / "member_4.nnk").is_file()
    run = json.loads((pipeline["occ"] / "run.json").read_text())
    assert run["command"] == "train-occ" and run["config"]["npos"] == 500
    assert (pipeline["eval"] / "confusion.png").is_file()


def test_pipeline_end_to_end_f1(pipeline):
    row = _metrics_row(pipeline["eval"] / "metrics.csv")
    assert row["method"] == "two-step" and row["npos"] == "500"
    assert float(row["f1"]) >= 0.85


def test_inputs_are_not_mutated(pipeline):
    assert _digest(pipeline["bundle"]) == pipeline["bundle_digest"]


def test_predict_threshold_override(pipeline, tmp_path):
    args = ["predict", "--bundle", str(pipeline["bundle"]), "--translation", str(pipeline["tr"]), "--model", str(pipeline["occ"])]
    assert main([*args, "--threshold", "0.3", "--out", str(tmp_path / "p3")]) == 0
    low = np.frombuffer((tmp_path / "p3" / "change_map.u8").read_bytes(), np.uint8)
    base = np.frombuffer((pipeline["pred"] / "change_map.u8").read_bytes(), np.uint8)
    assert np.all(low >= base)


def test_cae_map_and_features(pipeline, tmp_path):
    assert main(["cae-map", "--bundle", str(pipeline["bundle"]), "--translation", str(pipeline["tr"]), "--out", str(tmp_path / "m")]) == 0
    assert _metrics_row(tmp_path / "m" / "metrics.csv")["method"] == "cae-otsu"
    args = ["features", "--bundle", str(pipeline["bundle"]), "--translation", str(pipeline["tr"]), "--variant", "no-orig"]
    assert main([*args, "--out", str(tmp_path / "f")]) == 0
    assert np.load(tmp_path / "f" / "features.npy").shape == (128 * 128, 7)


def test_ablate_small_grid(pipeline, tmp_path):
    args = ["ablate", "--bundle", str(pipeline["bundle"]), "--translation", str(pipeline["tr"])]
    assert main([*args, "--grid", "20,10", "--reps", "2", "--max-epochs", "3", "--out", str(tmp_path / "a")]) == 0
    for name in ("metrics.csv", "report.csv", "curves.csv", "curves.png", "run.json"):
        assert (tmp_path / "a" / name).is_file()
    run = json.loads((tmp_path / "a" / "run.json").read_text())
    assert run["config"]["grid"] == "10,20" and len(run["seeds"]["repetitions"]) == 2
