import json
import shutil
from pathlib import Path

import pytest
import yaml

from debiasvae.cli import main

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "synth_small.yaml"


@pytest.fixture()
def config(tmp_path):
    raw = yaml.safe_load(CONFIG.read_text())
    raw["out_dir"] = str(tmp_path / "run")
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump(raw))
    return path


def run(*argv):
    return main([str(a) for a in argv])


def test_prepare_train_evaluate_report(config, tmp_path, capsys):
    out = tmp_path / "run"
    assert run("prepare", "--config", config) == 0
    assert run("train", "--config", config) == 0
    assert run("evaluate", "--config", config) == 0
    summary = json.loads((out / "evaluate" / "train" / "test_summary.json").read_text())
    assert set(summary["aggregate"]) == {"recall@20", "ndcg@100"}
    assert len(summary["groups"]) == 8
    for stage in ("prepare", "train", "evaluate/train"):
        manifest = json.loads((out / stage / "manifest.json").read_text())
        assert manifest["complete"] and manifest["seed"] == 0
        assert manifest["versions"]["debiasvae"]
    assert (out / "train" / "trace.tsv").exists()
    assert (out / "train" / "extreme_scores.tsv").exists()
    assert run("report", "--config", config) == 0
    assert "train\tndcg@100" in (out / "report" / "report.tsv").read_text()


def test_prepare_is_idempotent(config, tmp_path):
    cache = tmp_path / "run" / "prepare" / "prepared.npz"
    assert run("prepare", "--config", config) == 0
    first = cache.read_bytes()
    manifest = (tmp_path / "run" / "prepare" / "manifest.json").read_text()
    assert run("prepare", "--config", config) == 0
    assert cache.read_bytes() == first
    assert (tmp_path / "run" / "prepare" / "manifest.json").read_text() == manifest


def test_evaluate_without_checkpoint_names_train(config, capsys):
    assert run("prepare", "--config", config) == 0
    assert run("evaluate", "--config", config) != 0
    assert "debiasvae train" in capsys.readouterr().err


def test_train_without_prepare_names_prepare(config, capsys):
    assert run("train", "--config", config) != 0
    assert "debiasvae prepare" in capsys.readouterr().err


def test_stale_prepare_detected(config, capsys):
    assert run("prepare", "--config", config) == 0
    assert run("train", "--config", config, "--seed", 5) != 0
    assert "rerun `debiasvae prepare`" in capsys.readouterr().err


def test_missing_config_file(tmp_path, capsys):
    assert run("prepare", "--config", tmp_path / "nope.yaml") != 0
    assert "not found" in capsys.readouterr().err


def test_bad_k(config, capsys):
    assert run("train", "--config", config, "--k", 1.5) != 0


def test_sweep_and_augment(config, tmp_path):
    out = tmp_path / "run"
    assert run("prepare", "--config", config) == 0
    assert run("sweep", "--config", config, "--threads", 1) == 0
    lines = (out / "sweep" / "curve.tsv").read_text().splitlines()
    assert lines[0] == "# complete=True" and len(lines) == 5
    assert run("augment", "--config", config) == 0
    assert (out / "augment" / "counterfactuals.tsv").exists()
    assert run("evaluate", "--config", config, "--checkpoint", out / "augment") == 0
    assert (out / "evaluate" / "augment" / "test_summary.json").exists()


def test_synth_command_roundtrip(tmp_path):
    spec = tmp_path / "spec.yaml"
    spec.write_text(yaml.safe_dump({"n_users": 30, "n_items": 20, "n_categories": 3,
                                    "interactions_per_user": 4, "seed": 2}))
    assert run("synth", "--config", spec, "--out", tmp_path / "data") == 0
    first = {p.name: p.read_bytes() for p in (tmp_path / "data").iterdir()}
    assert {"interactions.csv", "categories.csv", "truth.npz", "manifest.json"} <= set(first)
    shutil.rmtree(tmp_path / "data")
    assert run("synth", "--config", spec, "--out", tmp_path / "data") == 0
    assert {p.name: p.read_bytes() for p in (tmp_path / "data").iterdir()} == first
    # the written files feed a file-based experiment
    cfg = tmp_path / "files.yaml"
    cfg.write_text(yaml.safe_dump({
        "out_dir": str(tmp_path / "frun"),
        "data": {"interactions": "data/interactions.csv", "categories": "data/categories.csv",
                 "ground_truth": "data/truth.npz", "min_item_clicks": 1, "n_val": 3, "n_test": 8},
        "train": {"epochs": 2, "hidden_dim": 8, "latent_dim": 4, "batch_size": 10},
    }))
    assert run("prepare", "--config", cfg) == 0
    assert (tmp_path / "frun" / "prepare" / "truth.npz").exists()
    assert run("train", "--config", cfg) == 0
