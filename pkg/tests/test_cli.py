from __future__ import annotations

import json
from unittest.mock import patch

import pandas as pd
import pytest

from petdiff.main import create_parser, main
from petdiff.runners.evaluator import CSV_COLUMNS, Evaluator, MetricsReport
from petdiff.storage import read_manifest, read_volume

from conftest import tiny_config


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "config.json"
    tiny_config(tmp_path / "data", tmp_path / "run", steps=2, val_every=0, n_phantoms=5).save(path)
    return path


def test_help_exits_cleanly(capsys):
    """Test --help documents the flags and exits 0"""
    assert main(["eval", "--help"]) == 0
    assert "--checkpoint" in capsys.readouterr().out


def test_missing_config_is_a_usage_error():
    """Test a missing --config is a usage error"""
    assert main(["train"]) == 2


def test_unknown_command():
    """Test an unknown subcommand is a usage error"""
    assert main(["serve", "--config", "x.json"]) == 2


def test_every_command_is_registered():
    """Test every subcommand parses"""
    parser = create_parser()
    for command in ("phantom-gen", "train", "sample", "eval", "ablate"):
        args = parser.parse_args([command, "--config", "c.json", *(
            ["--checkpoint", "ck", "--lpet", "a.vol", "--ct", "b.vol", "--output", "o.vol"] if command == "sample" else []
        )])
        assert args.command == command


def test_missing_config_file_fails(tmp_path, capsys):
    """Test a missing config file exits 1 with a diagnostic"""
    assert main(["train", "--config", str(tmp_path / "nope.json")]) == 1
    assert "config file not found" in capsys.readouterr().err


def test_invalid_override_fails(config_file, capsys):
    """Test an out-of-range override exits 1 with a diagnostic"""
    assert main(["phantom-gen", "--config", str(config_file), "--dose", "1.5"]) == 1
    assert "invalid override" in capsys.readouterr().err


def test_end_to_end(config_file, tmp_path):
    """Test phantom-gen, train, eval and sample from the command line"""
    data, run = tmp_path / "data", tmp_path / "run"

    assert main(["phantom-gen", "--config", str(config_file), "--seed", "3", "--dose", "0.1", "0.5", "--workers", "2"]) == 0
    records = read_manifest(data)
    assert len(records) == 10
    assert {r.dose.fraction for r in records} == {0.1, 0.5}

    assert main(["train", "--config", str(config_file), "--dose", "0.1", "0.5", "--quiet"]) == 0
    assert (run / "checkpoint" / "checkpoint.json").exists()
    assert json.loads((run / "config.json").read_text())["steps"] == 2

    assert main(["eval", "--config", str(config_file), "-K", "2", "--quiet"]) == 0
    metrics = pd.read_csv(run / "metrics.csv")
    assert len(metrics) == 2
    assert metrics["dose_fraction"].tolist() == [0.1, 0.5]

    record = next(r for r in records if r.split.value == "test")
    lpet_path, _, ct_path = record.paths(data)
    output = tmp_path / "denoised.vol"
    assert main([
        "sample", "--config", str(config_file), "--checkpoint", str(run / "checkpoint"),
        "--lpet", str(lpet_path), "--ct", str(ct_path), "--output", str(output), "-K", "2", "--quiet",
    ]) == 0
    denoised, header = read_volume(output)
    assert denoised.shape == (1, 16, 16, 16)
    assert header.dose_fraction == 1.0


def test_eval_fails_when_every_record_fails(config_file, tmp_path, capsys):
    """An evaluation with no scored record exits non-zero"""
    failed = MetricsReport(pd.DataFrame(columns=CSV_COLUMNS), errors=[{"id": "p0000_d0.1", "error": "bad shape"}])
    with patch.object(Evaluator, "evaluate", return_value=failed):
        assert main(["eval", "--config", str(config_file), "--checkpoint", str(tmp_path / "ck"), "--quiet"]) == 1
    assert "all 1 records failed" in capsys.readouterr().err


def test_pipeline_is_reproducible(tmp_path):
    """Two full phantom-gen, train, eval runs with one seed give identical metrics"""
    outputs = []
    for name in ("first", "second"):
        work = tmp_path / name
        config_file = work / "config.json"
        tiny_config(work / "data", work / "run", steps=2, val_every=0, n_phantoms=5).save(config_file)
        for argv in (["phantom-gen", "--seed", "11"], ["train", "--seed", "4", "--quiet"], ["eval", "--seed", "4", "--quiet"]):
            assert main([argv[0], "--config", str(config_file), *argv[1:]]) == 0
        outputs.append((work / "run" / "metrics.csv").read_bytes())
    assert outputs[0] == outputs[1]
