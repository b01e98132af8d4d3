"""
Desk-scale smoke run: generate a small phantom dataset, train the full model
briefly and evaluate it, twice from scratch with the same seeds, then check
that both metric files are identical.

Run from the repository root: python scripts/run_smoke.py [work_dir]
"""

import sys
import os
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from pathlib import Path

from petdiff.config import DenoiserConfig, RunConfig
from petdiff.logging_config import get_logger, setup_logging
from petdiff.main import main as cli
from petdiff.models import DoseProtocol, PhantomSpec

logger = get_logger("smoke")


def smoke_config(work_dir: Path) -> Path:
    """Write a run config small enough for a laptop CPU"""
    config = RunConfig(
        dataset=str(work_dir / "phantoms"),
        out=str(work_dir / "run"),
        denoiser=DenoiserConfig(base_channels=8, channel_mult=[1, 2], dose_embed_dim=16, time_embed_dim=16),
        phantom=PhantomSpec(shape=(32, 32, 32)),
        protocol=DoseProtocol(fractions=[0.02, 0.1, 0.5]),
        n_phantoms=10,
        timesteps=100,
        sampling_steps=10,
        batch_size=2,
        steps=50,
        crop_size=16,
        log_every=10,
        checkpoint_every=0,
        val_every=25,
    )
    return config.save(work_dir / "config.json")


def run_pipeline(work_dir: Path) -> bytes:
    """phantom-gen, train and eval into `work_dir`; returns the metrics CSV bytes"""
    config_path = str(smoke_config(work_dir))
    steps = [
        ["phantom-gen", "--config", config_path, "--workers", "4"],
        ["train", "--config", config_path, "--quiet"],
        ["eval", "--config", config_path, "--quiet"],
    ]
    for argv in steps:
        logger.info(f"Running petdiff {' '.join(argv)}")
        code = cli(argv)
        if code:
            raise RuntimeError(f"petdiff {argv[0]} exited with {code}")
    return (work_dir / "run" / "metrics.csv").read_bytes()


def run(work_dir: Path) -> None:
    first = run_pipeline(work_dir / "first")
    second = run_pipeline(work_dir / "second")
    if first != second:
        raise RuntimeError("repeated pipeline runs produced different metrics")
    logger.info("Repeated pipeline runs are byte-identical")


def main():
    """Run the smoke flow"""
    setup_logging()
    work_dir = Path(sys.argv[1] if len(sys.argv) > 1 else "local_storage/smoke")
    try:
        logger.info(f"Starting smoke run in {work_dir}...")
        run(work_dir)
        logger.info("Smoke run completed successfully!")
    except Exception as e:
        logger.error(f"Smoke run failed: {e}")
        raise


if __name__ == "__main__":
    main()
