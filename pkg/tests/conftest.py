from __future__ import annotations

from pathlib import Path

import pytest

from petdiff.config import DenoiserConfig, RunConfig, settings
from petdiff.models import DoseProtocol, PhantomSpec
from petdiff.phantom import build_dataset

TINY_DENOISER = DenoiserConfig(base_channels=4, channel_mult=[1, 2], dose_embed_dim=8, time_embed_dim=8, norm_groups=2)


def tiny_config(dataset: Path, out: Path, **overrides) -> RunConfig:
    """A run small enough to train, sample and score in seconds on CPU"""
    fields = dict(
        dataset=str(dataset),
        out=str(out),
        denoiser=TINY_DENOISER,
        phantom=PhantomSpec(shape=(16, 16, 16)),
        protocol=DoseProtocol(fractions=[0.05, 0.5]),
        n_phantoms=5,
        split_ratios=(0.6, 0.2, 0.2),
        timesteps=20,
        sampling_steps=4,
        batch_size=2,
        steps=4,
        crop_size=8,
        log_every=1,
        checkpoint_every=0,
        val_every=2,
        val_records=1,
    )
    fields.update(overrides)
    return RunConfig(**fields)


@pytest.fixture(autouse=True)
def no_log_files(monkeypatch):
    monkeypatch.setattr(settings, "log_to_file", False)
    monkeypatch.setattr(settings, "device", "cpu")


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory) -> Path:
    root = tmp_path_factory.mktemp("phantoms")
    config = tiny_config(root, root)
    build_dataset(config.phantom, config.protocol, config.n_phantoms, config.split_ratios, root, master_seed=1)
    return root
