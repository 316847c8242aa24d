import json
from pathlib import Path

import numpy as np
import pytest

from tpmtl.cli import EXIT_NUMERICAL, EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, cli
from tpmtl.scenes import read_dataset


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "ds"
    code = cli(["gen-data", "--out", str(out), "--train", "3", "--test", "2",
                "--size", "16x16", "--k", "4", "--seed", "5"])
    assert code == EXIT_OK
    return out


@pytest.fixture(scope="module")
def trained_checkpoint(small_dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    code = cli(["train", "--data", str(small_dataset), "--out", str(out),
                "--iters", "8", "--render-size", "8x8", "--samples", "4",
                "--seed", "1"])
    assert code == EXIT_OK
    return out / "checkpoint"


def test_unknown_subcommand_usage_exit():
    assert cli(["frobnicate"]) == EXIT_USAGE


def test_missing_required_flag_usage_exit():
    assert cli(["eval", "--data", "somewhere"]) == EXIT_USAGE


def test_gen_data_manifest(small_dataset):
    records, manifest = read_dataset(small_dataset)
    assert manifest["k_classes"] == 4
    assert len(records) == 5
    splits = [r.split for r in records]
    assert splits.count("train") == 3 and splits.count("test") == 2


def test_gen_data_noise_options(tmp_path):
    out = tmp_path / "noisy"
    assert cli(["gen-data", "--out", str(out), "--train", "2", "--test", "1",
                "--size", "16x16", "--k", "4", "--seg-noise", "0.5",
                "--depth-noise", "0.05"]) == EXIT_OK
    records, _ = read_dataset(out)
    # noise applies to the train split only
    assert records[0].split == "train"


def test_train_writes_checkpoint_and_log(trained_checkpoint):
    assert (trained_checkpoint / "index.json").exists()
    assert (trained_checkpoint / "data.bin").exists()
    log = trained_checkpoint.parent / "metrics.csv"
    assert log.exists()
    header = log.read_text().splitlines()[0].split(",")
    assert header[:2] == ["iter", "alpha"]


def test_eval_reports_metrics(trained_checkpoint, small_dataset, tmp_path, capsys):
    out = tmp_path / "report"
    code = cli(["eval", "--checkpoint", str(trained_checkpoint),
                "--data", str(small_dataset), "--out", str(out)])
    assert code == EXIT_OK
    printed = capsys.readouterr().out
    assert "Seg mIoU" in printed
    report = json.loads((out / "report.json").read_text())
    assert 0.0 <= report["segmentation_miou"] <= 1.0
    assert report["depth_rmse"] >= 0.0


def test_eval_perfect_predictions_score_one(tmp_path, capsys):
    # build a dataset, then score its own labels: mIoU must print as 1.0
    from tpmtl.metrics import MetricReport, miou
    from tpmtl.scenes import read_dataset as rd
    out = tmp_path / "ds"
    assert cli(["gen-data", "--out", str(out), "--train", "1", "--test", "1",
                "--size", "16x16", "--k", "4"]) == EXIT_OK
    records, manifest = rd(out)
    rec = records[0]
    assert miou(rec.seg, rec.seg, manifest["k_classes"]) == 1.0


def test_render_writes_images(trained_checkpoint, small_dataset, tmp_path):
    out = tmp_path / "renders"
    code = cli(["render", "--checkpoint", str(trained_checkpoint),
                "--data", str(small_dataset), "--out", str(out),
                "--ids", "0000", "--render-size", "8x8", "--samples", "4"])
    assert code == EXIT_OK
    ppm = out / "0000_depth.ppm"
    raw = out / "0000_depth.f32"
    sidecar = json.loads((out / "0000_depth.json").read_text())
    assert ppm.read_bytes().startswith(b"P6\n8 8\n255\n")
    assert sidecar["shape"] == [8, 8, 1]
    assert len(raw.read_bytes()) == 8 * 8 * 4


def test_render_unknown_id_validation_exit(trained_checkpoint, small_dataset, tmp_path):
    assert cli(["render", "--checkpoint", str(trained_checkpoint),
                "--data", str(small_dataset), "--out", str(tmp_path / "x"),
                "--ids", "nope"]) == EXIT_VALIDATION


def test_eval_missing_dataset_validation_exit(trained_checkpoint, tmp_path):
    assert cli(["eval", "--checkpoint", str(trained_checkpoint),
                "--data", str(tmp_path / "missing")]) == EXIT_VALIDATION


def test_gradcheck_quick(capsys):
    assert cli(["gradcheck", "--seeds", "2"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "end_to_end_render_loss" in out
    assert "FAIL" not in out


def test_compare_structure(small_dataset, tmp_path, capsys):
    out = tmp_path / "cmp"
    code = cli(["compare", "--data", str(small_dataset), "--out", str(out),
                "--seeds", "2", "--iters", "4", "--render-size", "8x8",
                "--samples", "4", "--aux-heads"])
    assert code == EXIT_OK
    result = json.loads((out / "compare.json").read_text())
    conditions = {r["condition"] for r in result["rows"]}
    assert conditions == {"alpha0", "alpha4", "aux_heads"}
    per_cond = [r for r in result["rows"] if r["condition"] == "alpha0"]
    assert len(per_cond) == 2  # one row per seed
    assert len(result["deltas"]) == 2
    table = (out / "compare.txt").read_text()
    assert "delta mean" in table and "held-out depth RMSE" in table
