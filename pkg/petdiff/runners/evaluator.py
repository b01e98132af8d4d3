"""
Evaluation of denoised PET against the standard-dose reference.

Every test record is scored twice, LPET vs SPET (the baseline) and the
denoised volume vs SPET, and the rows are aggregated per dose fraction.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Callable, Optional

import numpy as np
import pandas as pd
import torch

from ..diffusion import NoiseSchedule, respace, sample
from ..logging_config import get_logger
from ..models import DoseLevel, SampleRecord, Split, Volume
from ..network.denoiser import Denoiser
from ..storage import write_report, write_text
from ..utils.metrics import psnr, ssim
from .data import Normalizer, VolumeCache, load_split, volume_batch
from .trainer import load_trained

logger = get_logger("runners.evaluator")

CSV_COLUMNS = ["id", "dose_fraction", "psnr_lpet", "ssim_lpet", "psnr_pred", "ssim_pred"]
METRIC_COLUMNS = CSV_COLUMNS[2:]

# (record, lpet, ct) -> denoised PET in activity units
Predictor = Callable[[SampleRecord, Volume, Volume], Volume]


class MetricsReport:
    """Per-record metric rows, their per-dose means and any per-record errors"""

    def __init__(
        self,
        rows: pd.DataFrame,
        errors: Optional[list[dict[str, str]]] = None,
        metadata: Optional[dict[str, Any]] = None,
    ):
        missing = [c for c in CSV_COLUMNS if c not in rows.columns]
        if missing:
            raise ValueError(f"metric rows lack columns {missing}")
        self.rows = rows[CSV_COLUMNS].reset_index(drop=True)
        self.errors = errors or []
        self.metadata = metadata or {}

    def per_dose(self) -> pd.DataFrame:
        """Mean of every metric per dose fraction, with the record count"""
        if self.rows.empty:
            return pd.DataFrame(columns=["dose_fraction", "n", *METRIC_COLUMNS])
        grouped = self.rows.groupby("dose_fraction", sort=True)
        means = grouped[METRIC_COLUMNS].mean()
        means.insert(0, "n", grouped.size())
        return means.reset_index()

    def to_csv(self) -> str:
        return self.rows.to_csv(index=False, float_format="%.10g")

    def to_dict(self) -> dict[str, Any]:
        return {
            "metadata": self.metadata,
            "rows": self.rows.to_dict(orient="records"),
            "per_dose": self.per_dose().to_dict(orient="records"),
            "errors": self.errors,
        }

    def write(self, out_dir: str | Path) -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        csv_path = write_text(out_dir / "metrics.csv", self.to_csv())
        json_path = write_report(out_dir / "metrics.json", self.to_dict())
        return csv_path, json_path


def denoise_volume(
    model: Denoiser,
    lpet: Volume,
    ct: Volume,
    dose: DoseLevel,
    schedule: NoiseSchedule,
    normalizer: Normalizer,
    seed: int = 0,
    progress: bool = False,
) -> Volume:
    """Sample SPET for one whole LPET/CT pair; returns activity units"""
    model_device = next(model.parameters()).device
    lpet_t, ct_t, dose_t = volume_batch(lpet, ct, dose, normalizer)
    generator = torch.Generator().manual_seed(seed)
    pred = sample(
        lpet_t.to(model_device), ct_t.to(model_device), dose_t.to(model_device),
        model, schedule, generator, progress=progress,
    )
    return lpet.with_data(normalizer.pet_inverse(pred[0].cpu().numpy().astype(np.float64)))


class Evaluator:
    def __init__(self, workers: int = 1):
        self.name = "Runner:Evaluator"
        self.workers = workers

    def score(self, record: SampleRecord, cache: VolumeCache, predictor: Predictor) -> dict[str, Any]:
        lpet, spet, ct = cache.get(record)
        pred = predictor(record, lpet, ct)
        if pred.shape != spet.shape:
            raise ValueError(f"prediction shape {pred.shape} does not match reference {spet.shape}")
        row = {
            "id": record.id,
            "dose_fraction": record.dose.fraction,
            "psnr_lpet": psnr(lpet, spet),
            "ssim_lpet": ssim(lpet, spet),
            "psnr_pred": psnr(pred, spet),
            "ssim_pred": ssim(pred, spet),
        }
        logger.info(
            f"{self.name}: {record.id} PSNR {row['psnr_lpet']:.3f} -> {row['psnr_pred']:.3f}, "
            f"SSIM {row['ssim_lpet']:.4f} -> {row['ssim_pred']:.4f}"
        )
        return row

    def evaluate_records(
        self,
        root: str | Path,
        records: list[SampleRecord],
        predictor: Predictor,
        metadata: Optional[dict[str, Any]] = None,
    ) -> MetricsReport:
        """Score every record; failures become error entries and the run continues"""
        cache = VolumeCache(root)

        def job(record: SampleRecord) -> dict[str, Any]:
            try:
                return {"row": self.score(record, cache, predictor)}
            except Exception as e:
                logger.error(f"{self.name}: {record.id} failed: {e}")
                return {"error": {"id": record.id, "error": str(e)}}

        with ThreadPoolExecutor(max_workers=max(self.workers, 1)) as pool:
            results = list(pool.map(job, records))

        rows = [r["row"] for r in results if "row" in r]
        errors = [r["error"] for r in results if "error" in r]
        report = MetricsReport(pd.DataFrame(rows, columns=CSV_COLUMNS), errors, metadata)
        for entry in report.per_dose().to_dict(orient="records"):
            logger.info(
                f"{self.name}: dose {entry['dose_fraction']:g} (n={entry['n']}) "
                f"LPET {entry['psnr_lpet']:.3f}/{entry['ssim_lpet']:.4f} "
                f"pred {entry['psnr_pred']:.3f}/{entry['ssim_pred']:.4f}"
            )
        return report

    def evaluate(
        self,
        checkpoint: str | Path,
        dataset: str | Path,
        K: int,
        split: Split = Split.TEST,
        doses: Optional[list[float]] = None,
        seed: Optional[int] = None,
    ) -> MetricsReport:
        model, config, schedule = load_trained(checkpoint)
        sampling = respace(schedule, K)
        normalizer = Normalizer.from_config(config)
        seed = config.seed if seed is None else seed
        records = load_split(dataset, split, doses)
        logger.info(f"{self.name}: evaluating {checkpoint} on {len(records)} {split.value} records with K={K}")

        def predictor(record: SampleRecord, lpet: Volume, ct: Volume) -> Volume:
            record_seed = int(np.random.SeedSequence([seed, record.seed]).generate_state(1)[0])
            return denoise_volume(model, lpet, ct, record.dose, sampling, normalizer, record_seed)

        metadata = {
            "checkpoint": str(checkpoint),
            "dataset": str(dataset),
            "variant": config.variant,
            "sampling_steps": K,
            "timesteps": schedule.T,
            "split": split.value,
            "seed": seed,
        }
        return self.evaluate_records(dataset, records, predictor, metadata)


def evaluate(checkpoint: str | Path, dataset: str | Path, K: int, workers: int = 1, **kwargs) -> MetricsReport:
    return Evaluator(workers).evaluate(checkpoint, dataset, K, **kwargs)
