"""
Training loop for the conditional denoiser.

Each step draws a batch of aligned crops, a uniform timestep and Gaussian
noise per sample, diffuses the SPET crop, runs the network on
(x_t, LPET, CT, t, dose) and takes one AdamW step on the hybrid loss, with
the learning rate cosine-annealed to `lr_min` over the run.
"""

from __future__ import annotations

import time
from pathlib import Path
from typing import Any, Optional

import numpy as np
import torch
from torch.optim import AdamW
from torch.optim.lr_scheduler import CosineAnnealingLR
from tqdm import tqdm

from ..config import RunConfig, settings
from ..diffusion import (
    DiffusionError,
    NoiseSchedule,
    cosine_schedule,
    hybrid_loss_terms,
    q_sample,
    respace,
    sample,
    sample_timesteps,
)
from ..logging_config import get_logger
from ..models import PetDiffError, Split
from ..network.denoiser import Denoiser, DenoiserError, build_denoiser
from ..storage import load_checkpoint, read_manifest, save_checkpoint
from ..utils.metrics import psnr, ssim
from .data import Batch, Normalizer, PatchSampler, VolumeCache, load_split, select_records

logger = get_logger("runners.trainer")


class TrainingError(PetDiffError):
    """Raised when training cannot continue; `step` is the failing step index"""

    def __init__(self, message: str, step: Optional[int] = None):
        self.message = message
        self.step = step
        super().__init__(f"step {step}: {message}" if step is not None else message)


def cosine_lr(step: int, total: int, lr: float, lr_min: float) -> float:
    """Learning rate after `step` scheduler steps of a cosine annealing run"""
    return lr_min + 0.5 * (lr - lr_min) * (1 + np.cos(np.pi * min(step, total) / total))


def checkpoint_metadata(config: RunConfig, schedule: NoiseSchedule, step: int, model: Denoiser) -> dict[str, Any]:
    return {
        "config": config.model_dump(mode="json"),
        "network": config.network_config().model_dump(mode="json"),
        "schedule": schedule.metadata(),
        "step": step,
        "variant": config.variant,
        "parameter_groups": model.parameter_groups(),
    }


def load_trained(checkpoint: str | Path, device: Optional[torch.device] = None) -> tuple[Denoiser, RunConfig, NoiseSchedule]:
    """Rebuild the network, its run config and its training schedule from a checkpoint directory"""
    state, metadata = load_checkpoint(Path(checkpoint))
    config = RunConfig.model_validate(metadata["config"])
    model = Denoiser(config.network_config())
    try:
        model.load_state_dict(state)
    except RuntimeError as e:
        raise TrainingError(f"checkpoint {checkpoint} does not match its config: {e}") from e
    model.to(device or torch.device(settings.device)).eval()
    return model, config, cosine_schedule(metadata["schedule"]["timesteps"])


class Trainer:
    """Owns the model parameters, the optimizer and the data stream of one run"""

    def __init__(self, config: RunConfig, doses: Optional[list[float]] = None):
        self.name = "Runner:Trainer"
        self.config = config
        self.device = torch.device(settings.device)
        if settings.num_threads:
            torch.set_num_threads(settings.num_threads)

        self.model = build_denoiser(config.network_config(), seed=config.seed).to(self.device)
        self.schedule = cosine_schedule(config.timesteps)
        self.optimizer = AdamW(self.model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
        self.scheduler = CosineAnnealingLR(self.optimizer, T_max=config.steps, eta_min=config.lr_min)
        self.generator = torch.Generator().manual_seed(config.seed)

        self.normalizer = Normalizer.from_config(config)
        self.cache = VolumeCache(config.dataset)
        train_records = load_split(config.dataset, Split.TRAIN, doses)
        self.cache.preload(train_records)
        self.sampler = PatchSampler(
            train_records,
            self.cache,
            self.normalizer,
            crop_size=config.crop_size,
            batch_size=config.batch_size,
            data_seed=config.data_seed,
            align=2 ** config.denoiser.levels,
        )
        self.val_records = select_records(read_manifest(Path(config.dataset)), Split.VAL, doses)[: config.val_records]

        self.step = 0
        self.history: list[dict[str, float]] = []
        logger.info(
            f"{self.name} initialized: variant={config.variant}, {len(train_records)} training records, "
            f"parameters {self.model.parameter_groups()}"
        )

    def loss_terms(self, batch: Batch, t: torch.Tensor, eps: torch.Tensor) -> dict[str, torch.Tensor]:
        batch = batch.to(self.device)
        t, eps = t.to(self.device), eps.to(self.device)
        x_t = q_sample(batch.spet, t, eps, self.schedule)
        out = self.model(x_t, batch.lpet, batch.ct, t, batch.dose)
        return hybrid_loss_terms(out, batch.spet, x_t, t, eps, self.schedule, self.config.vlb_weight)

    def train_step(self, batch: Batch) -> dict[str, float]:
        self.model.train()
        t = sample_timesteps(batch.spet.shape[0], self.schedule, self.generator)
        eps = torch.randn(batch.spet.shape, generator=self.generator)
        try:
            terms = self.loss_terms(batch, t, eps)
        except (DiffusionError, DenoiserError) as e:
            raise TrainingError(str(e), self.step) from e
        if not torch.isfinite(terms["loss"]):
            raise TrainingError(f"non-finite loss {terms['loss'].item()}", self.step)

        self.optimizer.zero_grad(set_to_none=True)
        terms["loss"].backward()
        self.optimizer.step()
        self.scheduler.step()
        self.step += 1
        return {name: float(value.detach()) for name, value in terms.items()}

    def validate(self) -> dict[str, float]:
        """PSNR/SSIM of sampled centre crops of the first validation records"""
        if not self.val_records:
            return {}
        batch = self.sampler.center_batch(self.val_records).to(self.device)
        self.model.eval()
        generator = torch.Generator().manual_seed(self.config.seed)
        pred = sample(
            batch.lpet, batch.ct, batch.dose, self.model,
            respace(self.schedule, self.config.sampling_steps), generator,
        )
        scores = {"val_psnr": 0.0, "val_ssim": 0.0}
        for i in range(pred.shape[0]):
            denoised = self.normalizer.pet_inverse(pred[i].cpu().numpy().astype(np.float64))
            reference = self.normalizer.pet_inverse(batch.spet[i].cpu().numpy().astype(np.float64))
            scores["val_psnr"] += psnr(denoised, reference) / pred.shape[0]
            scores["val_ssim"] += ssim(denoised, reference) / pred.shape[0]
        logger.info(f"{self.name}: step {self.step} validation PSNR {scores['val_psnr']:.3f} SSIM {scores['val_ssim']:.4f}")
        return scores

    def save(self, directory: Optional[Path] = None) -> Path:
        directory = Path(directory or Path(self.config.out) / "checkpoint")
        metadata = checkpoint_metadata(self.config, self.schedule, self.step, self.model)
        return save_checkpoint(directory, self.model.state_dict(), metadata)

    def run(self, progress: bool = True) -> Path:
        """Train for `config.steps` steps and return the final checkpoint directory"""
        config = self.config
        logger.info(f"{self.name}: training {config.steps} steps, batch {config.batch_size}, crop {config.crop_size}")
        started = time.perf_counter()
        steps = tqdm(range(self.step, config.steps), desc=f"train[{config.variant}]", disable=not progress)
        for _ in steps:
            terms = self.train_step(self.sampler.next_batch())
            terms["lr"] = self.optimizer.param_groups[0]["lr"]
            terms["step"] = self.step
            self.history.append(terms)
            steps.set_postfix(loss=f"{terms['loss']:.4f}")

            if self.step % config.log_every == 0:
                rate = self.step / max(time.perf_counter() - started, 1e-9)
                logger.info(
                    f"{self.name}: step {self.step} loss {terms['loss']:.5f} mse {terms['mse']:.5f} "
                    f"vlb {terms['vlb']:.5f} lr {terms['lr']:.2e} ({rate:.2f} steps/s)"
                )
            if config.val_every and self.step % config.val_every == 0 and self.step < config.steps:
                self.history[-1].update(self.validate())
            if config.checkpoint_every and self.step % config.checkpoint_every == 0 and self.step < config.steps:
                self.save(Path(config.out) / "checkpoints" / f"step_{self.step:06d}")

        final = self.save()
        logger.info(f"{self.name}: finished at step {self.step}, checkpoint {final}")
        return final


def train(config: RunConfig, doses: Optional[list[float]] = None, progress: bool = True) -> Path:
    return Trainer(config, doses).run(progress)
