"""
Ablation over the three network variants.

Every variant is trained with the same data seed, so all of them see the
same batches in the same order, then evaluated on the test split. Results
are averaged over model seeds and laid out as one row per method (LPET
baseline plus the variants) and one column per (metric, dose).
"""

from __future__ import annotations

from pathlib import Path
from typing import Any, Optional, Sequence

import pandas as pd

from ..config import VARIANTS, RunConfig
from ..logging_config import get_logger
from ..storage import write_report, write_text
from .evaluator import Evaluator, MetricsReport
from .trainer import Trainer

logger = get_logger("runners.ablation")

DEFAULT_SEEDS = (0, 1, 2)
BASELINE = "lpet"


def table_columns(fractions: Sequence[float]) -> list[str]:
    return [f"{metric}_{fraction:g}" for fraction in fractions for metric in ("psnr", "ssim")]


class AblationReport:
    def __init__(self, table: pd.DataFrame, per_seed: pd.DataFrame, metadata: dict[str, Any]):
        self.table = table
        self.per_seed = per_seed
        self.metadata = metadata

    def to_csv(self) -> str:
        return self.table.to_csv(index_label="method", float_format="%.10g")

    def to_dict(self) -> dict[str, Any]:
        return {
            "metadata": self.metadata,
            "table": self.table.reset_index(names="method").to_dict(orient="records"),
            "per_seed": self.per_seed.to_dict(orient="records"),
        }

    def write(self, out_dir: str | Path) -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        return (
            write_text(out_dir / "ablation.csv", self.to_csv()),
            write_report(out_dir / "ablation.json", self.to_dict()),
        )


def _long_rows(method: str, seed: int, report: MetricsReport, source: str) -> list[dict[str, Any]]:
    rows = []
    for entry in report.per_dose().to_dict(orient="records"):
        rows.append({
            "method": method,
            "seed": seed,
            "dose_fraction": entry["dose_fraction"],
            "psnr": entry[f"psnr_{source}"],
            "ssim": entry[f"ssim_{source}"],
        })
    return rows


class AblationRunner:
    def __init__(
        self,
        config: RunConfig,
        seeds: Optional[Sequence[int]] = None,
        variants: Sequence[str] = VARIANTS,
        doses: Optional[list[float]] = None,
        progress: bool = False,
    ):
        self.name = "Runner:Ablation"
        self.config = config
        self.seeds = list(seeds) if seeds else list(DEFAULT_SEEDS)
        self.variants = list(variants)
        self.doses = doses
        self.progress = progress
        self.evaluator = Evaluator(config.eval_workers)

    def run_variant(self, variant: str, seed: int) -> MetricsReport:
        out = Path(self.config.out) / variant.replace("+", "_") / f"seed_{seed}"
        config = self.config.model_copy(update={"variant": variant, "seed": seed, "out": str(out)})
        logger.info(f"{self.name}: training {variant} with seed {seed}")
        checkpoint = Trainer(config, self.doses).run(progress=self.progress)
        report = self.evaluator.evaluate(checkpoint, config.dataset, config.sampling_steps, doses=self.doses)
        report.write(out)
        return report

    def run(self) -> AblationReport:
        rows: list[dict[str, Any]] = []
        for seed in self.seeds:
            for index, variant in enumerate(self.variants):
                report = self.run_variant(variant, seed)
                if index == 0:
                    rows.extend(_long_rows(BASELINE, seed, report, "lpet"))
                rows.extend(_long_rows(variant, seed, report, "pred"))

        per_seed = pd.DataFrame(rows, columns=["method", "seed", "dose_fraction", "psnr", "ssim"])
        means = per_seed.groupby(["method", "dose_fraction"], sort=False)[["psnr", "ssim"]].mean()

        fractions = sorted(per_seed["dose_fraction"].unique())
        methods = [BASELINE, *self.variants]
        table = pd.DataFrame(index=pd.Index(methods, name="method"), columns=table_columns(fractions), dtype=float)
        for (method, fraction), values in means.iterrows():
            table.loc[method, f"psnr_{fraction:g}"] = values["psnr"]
            table.loc[method, f"ssim_{fraction:g}"] = values["ssim"]

        metadata = {
            "seeds": self.seeds,
            "variants": self.variants,
            "dataset": self.config.dataset,
            "steps": self.config.steps,
            "sampling_steps": self.config.sampling_steps,
            "data_seed": self.config.data_seed,
        }
        report = AblationReport(table, per_seed, metadata)
        report.write(self.config.out)
        logger.info(f"{self.name}: ablation over {len(self.seeds)} seeds written to {self.config.out}")
        return report


def ablate(config: RunConfig, seeds: Optional[Sequence[int]] = None, **kwargs) -> AblationReport:
    return AblationRunner(config, seeds, **kwargs).run()
