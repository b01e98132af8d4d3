from __future__ import annotations

import pandas as pd
import pytest

from petdiff.runners.ablation import AblationRunner, table_columns

from conftest import tiny_config


@pytest.fixture
def runner(tiny_dataset, tmp_path):
    return AblationRunner(tiny_config(tiny_dataset, tmp_path, steps=2, val_every=0), seeds=[0, 1])


def test_table_columns():
    """Test metric columns are grouped per dose"""
    assert table_columns([0.02, 0.5]) == ["psnr_0.02", "ssim_0.02", "psnr_0.5", "ssim_0.5"]


def test_ablation_table(runner, tmp_path):
    """Test the table has the LPET row plus one row per variant"""
    report = runner.run()
    assert runner.name == "Runner:Ablation"
    assert report.table.index.tolist() == ["lpet", "iddpm", "iddpm+hwa", "full"]
    assert report.table.columns.tolist() == table_columns([0.05, 0.5])
    assert report.table.notna().all().all()
    assert len(report.per_seed) == 2 * 4 * 2
    assert (tmp_path / "ablation.csv").exists()
    assert (tmp_path / "ablation.json").exists()
    assert (tmp_path / "iddpm_hwa" / "seed_1" / "metrics.csv").exists()


def test_table_holds_means_over_seeds(runner):
    """Test table cells are per-seed means"""
    report = runner.run()
    rows = report.per_seed[(report.per_seed["method"] == "full") & (report.per_seed["dose_fraction"] == 0.5)]
    assert report.table.loc["full", "psnr_0.5"] == pytest.approx(rows["psnr"].mean())
    lpet = report.per_seed[report.per_seed["method"] == "lpet"]
    assert lpet.groupby("dose_fraction")["psnr"].nunique().eq(1).all()


def test_ablation_is_reproducible(tiny_dataset, tmp_path):
    """Test a repeated ablation gives the same tables"""
    a = AblationRunner(tiny_config(tiny_dataset, tmp_path / "a", steps=2, val_every=0), seeds=[3]).run()
    b = AblationRunner(tiny_config(tiny_dataset, tmp_path / "b", steps=2, val_every=0), seeds=[3]).run()
    pd.testing.assert_frame_equal(a.table, b.table)
    assert (tmp_path / "a" / "ablation.csv").read_text() == (tmp_path / "b" / "ablation.csv").read_text()
