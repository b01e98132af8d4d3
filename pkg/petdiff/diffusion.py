"""
Improved-DDPM machinery for conditional PET denoising.

Schedules are float64 numpy arrays; per-step coefficients are gathered into
torch tensors matching the data. Timestep arguments are indices into the
schedule at hand; a respaced schedule maps its indices back to the original
step numbers through `timesteps`, which is what the network is conditioned on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional, Protocol

import numpy as np
import torch
from tqdm import tqdm

from .logging_config import get_logger
from .models import PetDiffError

logger = get_logger("diffusion")

COSINE_OFFSET = 0.008
MAX_BETA = 0.999
VLB_WEIGHT = 0.001
# Half-width of one intensity bin of the discretized decoder for data in [-1, 1]
DECODER_BIN = 1.0 / 255.0


class DiffusionError(PetDiffError, ValueError):
    """Raised for invalid schedules, timesteps or non-finite model output"""
    pass


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    betas: np.ndarray
    alpha_bar: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        betas = np.array(self.betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise DiffusionError("betas must be a non-empty 1D array")
        if not np.all((betas > 0) & (betas < 1)):
            raise DiffusionError("every beta must lie in (0, 1)")
        alpha_bar = np.cumprod(1.0 - betas) if self.alpha_bar is None else np.array(self.alpha_bar, dtype=np.float64)
        if alpha_bar.shape != betas.shape:
            raise DiffusionError("alpha_bar and betas must have the same length")
        if np.any(np.diff(alpha_bar) >= 0):
            raise DiffusionError("alpha_bar must be strictly decreasing")
        betas.setflags(write=False)
        alpha_bar.setflags(write=False)
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alpha_bar", alpha_bar)

    @property
    def T(self) -> int:
        return int(self.betas.size)

    @property
    def timesteps(self) -> np.ndarray:
        """Network-facing step number of each schedule index"""
        return np.arange(self.T)

    @cached_property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @cached_property
    def alpha_bar_prev(self) -> np.ndarray:
        return np.append(1.0, self.alpha_bar[:-1])

    @cached_property
    def posterior_variance(self) -> np.ndarray:
        """beta-tilde; zero at index 0"""
        return self.betas * (1.0 - self.alpha_bar_prev) / (1.0 - self.alpha_bar)

    @cached_property
    def posterior_log_variance_clipped(self) -> np.ndarray:
        variance = self.posterior_variance
        if self.T == 1:
            return np.log(self.betas)
        return np.log(np.append(variance[1], variance[1:]))

    @cached_property
    def log_variance_floor(self) -> np.ndarray:
        """log beta-tilde, with beta at index 0 where beta-tilde vanishes"""
        variance = self.posterior_variance.copy()
        variance[0] = self.betas[0]
        return np.log(variance)

    @cached_property
    def posterior_mean_coef1(self) -> np.ndarray:
        return self.betas * np.sqrt(self.alpha_bar_prev) / (1.0 - self.alpha_bar)

    @cached_property
    def posterior_mean_coef2(self) -> np.ndarray:
        return (1.0 - self.alpha_bar_prev) * np.sqrt(self.alphas) / (1.0 - self.alpha_bar)

    def metadata(self) -> dict:
        return {"name": "cosine", "timesteps": self.T}


@dataclass(frozen=True, eq=False)
class RespacedSchedule(NoiseSchedule):
    kept: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    original_steps: int = 0

    def __post_init__(self) -> None:
        super().__post_init__()
        kept = np.array(self.kept, dtype=np.int64)
        if kept.shape != self.betas.shape:
            raise DiffusionError("kept timesteps must match the respaced betas")
        if np.any(np.diff(kept) <= 0):
            raise DiffusionError("kept timesteps must be strictly increasing")
        kept.setflags(write=False)
        object.__setattr__(self, "kept", kept)

    @property
    def timesteps(self) -> np.ndarray:
        return self.kept

    def metadata(self) -> dict:
        return {"name": "cosine", "timesteps": self.original_steps, "sampling_steps": self.T}


@dataclass
class ModelOut:
    """Network output: predicted noise and the variance interpolation weight v in [0, 1]"""

    eps_pred: torch.Tensor
    v_pred: torch.Tensor

    def __post_init__(self) -> None:
        if self.eps_pred.shape != self.v_pred.shape:
            raise DiffusionError(f"eps_pred {tuple(self.eps_pred.shape)} and v_pred {tuple(self.v_pred.shape)} differ")


class NoisePredictor(Protocol):
    def __call__(
        self, x_t: torch.Tensor, lpet: torch.Tensor, ct: torch.Tensor, t: torch.Tensor, dose: torch.Tensor
    ) -> ModelOut: ...


def cosine_schedule(T: int, s: float = COSINE_OFFSET, max_beta: float = MAX_BETA) -> NoiseSchedule:
    """beta_t = min(1 - f(t+1)/f(t), max_beta) with f(t) = cos^2(((t/T + s)/(1 + s)) * pi/2)"""
    if T < 2:
        raise DiffusionError(f"cosine schedule needs T >= 2, got {T}")

    def f(t: np.ndarray) -> np.ndarray:
        return np.cos(((t / T + s) / (1 + s)) * math.pi / 2) ** 2

    steps = np.arange(T, dtype=np.float64)
    betas = np.minimum(1.0 - f(steps + 1) / f(steps), max_beta)
    return NoiseSchedule(betas=betas)


def respace(schedule: NoiseSchedule, K: int) -> RespacedSchedule:
    """
    Keep K evenly strided steps of `schedule`, always including the last one.
    alpha_bar is copied at the kept steps, so q(x_s | x_0) is unchanged.
    """
    T = schedule.T
    if not 1 <= K <= T:
        raise DiffusionError(f"cannot respace {T} steps into {K}")
    if K == 1:
        kept = np.array([T - 1], dtype=np.int64)
    else:
        kept = np.floor(np.arange(K) * (T - 1) / (K - 1) + 0.5).astype(np.int64)
    alpha_bar = schedule.alpha_bar[kept]
    betas = 1.0 - alpha_bar / np.append(1.0, alpha_bar[:-1])
    return RespacedSchedule(betas=betas, alpha_bar=alpha_bar, kept=kept, original_steps=T)


def _as_index(t: int | torch.Tensor, schedule: NoiseSchedule, device: torch.device) -> torch.Tensor:
    index = torch.as_tensor(t, dtype=torch.long, device=device)
    if index.numel() and (int(index.min()) < 0 or int(index.max()) >= schedule.T):
        raise DiffusionError(f"timestep out of range [0, {schedule.T}): {index.tolist()}")
    return index


def _extract(values: np.ndarray, index: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    out = torch.from_numpy(np.ascontiguousarray(values)).to(device=like.device)[index].to(like.dtype)
    return out.reshape(tuple(index.shape) + (1,) * (like.dim() - index.dim()))


def mean_flat(x: torch.Tensor) -> torch.Tensor:
    return x.mean(dim=tuple(range(1, x.dim())))


def q_sample(x0: torch.Tensor, t: int | torch.Tensor, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps"""
    if x0.shape != eps.shape:
        raise DiffusionError(f"x0 {tuple(x0.shape)} and eps {tuple(eps.shape)} differ")
    index = _as_index(t, schedule, x0.device)
    return (
        _extract(np.sqrt(schedule.alpha_bar), index, x0) * x0
        + _extract(np.sqrt(1.0 - schedule.alpha_bar), index, x0) * eps
    )


def q_posterior_mean_variance(
    x0: torch.Tensor, x_t: torch.Tensor, t: int | torch.Tensor, schedule: NoiseSchedule
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Mean, variance and clipped log-variance of q(x_{t-1} | x_t, x_0)"""
    index = _as_index(t, schedule, x_t.device)
    mean = _extract(schedule.posterior_mean_coef1, index, x_t) * x0 + _extract(schedule.posterior_mean_coef2, index, x_t) * x_t
    variance = _extract(schedule.posterior_variance, index, x_t).expand_as(x_t)
    log_variance = _extract(schedule.posterior_log_variance_clipped, index, x_t).expand_as(x_t)
    return mean, variance, log_variance


def interpolate_log_variance(v: torch.Tensor, log_beta: torch.Tensor, log_beta_tilde: torch.Tensor) -> torch.Tensor:
    return v * log_beta + (1.0 - v) * log_beta_tilde


def learned_log_variance(v: torch.Tensor, t: int | torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    if torch.any(v < 0) or torch.any(v > 1):
        raise DiffusionError("variance weight v must lie in [0, 1]")
    index = _as_index(t, schedule, v.device)
    return interpolate_log_variance(
        v, _extract(np.log(schedule.betas), index, v), _extract(schedule.log_variance_floor, index, v)
    )


def learned_variance(v: torch.Tensor, t: int | torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Sigma = exp(v log beta_t + (1 - v) log beta-tilde_t); beta_0 at t = 0"""
    return torch.exp(learned_log_variance(v, t, schedule))


def predict_x0_from_eps(x_t: torch.Tensor, t: int | torch.Tensor, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    index = _as_index(t, schedule, x_t.device)
    return (
        _extract(np.sqrt(1.0 / schedule.alpha_bar), index, x_t) * x_t
        - _extract(np.sqrt(1.0 / schedule.alpha_bar - 1.0), index, x_t) * eps
    )


def p_mean_variance(
    out: ModelOut,
    x_t: torch.Tensor,
    t: int | torch.Tensor,
    schedule: NoiseSchedule,
    clip_denoised: bool = False,
) -> dict[str, torch.Tensor]:
    """Model mean and variance of p(x_{t-1} | x_t); clip_denoised clamps the implied x0 to [-1, 1] first"""
    if out.eps_pred.shape != x_t.shape:
        raise DiffusionError(f"model output {tuple(out.eps_pred.shape)} does not match x_t {tuple(x_t.shape)}")
    if not (torch.isfinite(out.eps_pred).all() and torch.isfinite(out.v_pred).all()):
        raise DiffusionError("model output contains NaN or Inf")
    index = _as_index(t, schedule, x_t.device)
    log_variance = learned_log_variance(out.v_pred, index, schedule)
    pred_x0 = predict_x0_from_eps(x_t, index, out.eps_pred, schedule)
    if clip_denoised:
        pred_x0 = pred_x0.clamp(-1.0, 1.0)
        mean, _, _ = q_posterior_mean_variance(pred_x0, x_t, index, schedule)
    else:
        mean = _extract(1.0 / np.sqrt(schedule.alphas), index, x_t) * (
            x_t - _extract(schedule.betas / np.sqrt(1.0 - schedule.alpha_bar), index, x_t) * out.eps_pred
        )
    return {
        "mean": mean,
        "variance": torch.exp(log_variance),
        "log_variance": log_variance,
        "pred_x0": pred_x0,
    }


def p_step(
    out: ModelOut,
    x_t: torch.Tensor,
    t: int | torch.Tensor,
    schedule: NoiseSchedule,
    generator: Optional[torch.Generator] = None,
    clip_denoised: bool = False,
) -> torch.Tensor:
    """One reverse step: mu + sqrt(Sigma) z, with z = 0 at index 0"""
    index = _as_index(t, schedule, x_t.device)
    stats = p_mean_variance(out, x_t, index, schedule, clip_denoised)
    if not torch.any(index != 0):
        return stats["mean"]
    noise = torch.randn(x_t.shape, generator=generator, dtype=x_t.dtype).to(x_t.device)
    nonzero = (index != 0).to(x_t.dtype).reshape(tuple(index.shape) + (1,) * (x_t.dim() - index.dim()))
    return stats["mean"] + nonzero * torch.exp(0.5 * stats["log_variance"]) * noise


def normal_kl(mean1, logvar1, mean2, logvar2) -> torch.Tensor:
    """KL(N(mean1, exp(logvar1)) || N(mean2, exp(logvar2))) in nats, broadcasting"""
    tensor = next(obj for obj in (mean1, logvar1, mean2, logvar2) if isinstance(obj, torch.Tensor))
    logvar1, logvar2 = [
        x if isinstance(x, torch.Tensor) else torch.tensor(x).to(tensor)
        for x in (logvar1, logvar2)
    ]
    return 0.5 * (
        -1.0
        + logvar2
        - logvar1
        + torch.exp(logvar1 - logvar2)
        + ((mean1 - mean2) ** 2) * torch.exp(-logvar2)
    )


def approx_standard_normal_cdf(x: torch.Tensor) -> torch.Tensor:
    return 0.5 * (1.0 + torch.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * torch.pow(x, 3))))


def discretized_gaussian_log_likelihood(x: torch.Tensor, *, means: torch.Tensor, log_scales: torch.Tensor) -> torch.Tensor:
    """Log-probability (nats) of x in [-1, 1] under a Gaussian discretized into 255 bins"""
    centered = x - means
    inv_stdv = torch.exp(-log_scales)
    cdf_plus = approx_standard_normal_cdf(inv_stdv * (centered + DECODER_BIN))
    cdf_min = approx_standard_normal_cdf(inv_stdv * (centered - DECODER_BIN))
    log_cdf_plus = torch.log(cdf_plus.clamp(min=1e-12))
    log_one_minus_cdf_min = torch.log((1.0 - cdf_min).clamp(min=1e-12))
    log_cdf_delta = torch.log((cdf_plus - cdf_min).clamp(min=1e-12))
    return torch.where(
        x < -0.999,
        log_cdf_plus,
        torch.where(x > 0.999, log_one_minus_cdf_min, log_cdf_delta),
    )


def hybrid_loss_terms(
    out: ModelOut,
    x0: torch.Tensor,
    x_t: torch.Tensor,
    t: int | torch.Tensor,
    eps: torch.Tensor,
    schedule: NoiseSchedule,
    vlb_weight: float = VLB_WEIGHT,
) -> dict[str, torch.Tensor]:
    """
    mse(eps_pred, eps) + vlb_weight * L_vlb. The variational term sees the mean
    through a stop-gradient, so it only trains v: KL to the true posterior for
    t > 0 and the discretized decoder NLL at t = 0.
    """
    if not (x0.shape == x_t.shape == eps.shape == out.eps_pred.shape):
        raise DiffusionError("x0, x_t, eps and the model output must share one shape")
    index = _as_index(t, schedule, x_t.device)
    if index.dim() == 0:
        index = index.expand(x_t.shape[0])

    mse = mean_flat((out.eps_pred - eps) ** 2)

    frozen = ModelOut(eps_pred=out.eps_pred.detach(), v_pred=out.v_pred)
    stats = p_mean_variance(frozen, x_t, index, schedule)
    true_mean, _, true_log_variance = q_posterior_mean_variance(x0, x_t, index, schedule)
    kl = mean_flat(normal_kl(true_mean, true_log_variance, stats["mean"], stats["log_variance"]))
    decoder_nll = mean_flat(
        -discretized_gaussian_log_likelihood(x0, means=stats["mean"], log_scales=0.5 * stats["log_variance"])
    )
    vlb = torch.where(index == 0, decoder_nll, kl)

    return {
        "loss": (mse + vlb_weight * vlb).mean(),
        "mse": mse.mean(),
        "vlb": vlb.mean(),
    }


def hybrid_loss(
    out: ModelOut,
    x0: torch.Tensor,
    x_t: torch.Tensor,
    t: int | torch.Tensor,
    eps: torch.Tensor,
    schedule: NoiseSchedule,
    vlb_weight: float = VLB_WEIGHT,
) -> torch.Tensor:
    return hybrid_loss_terms(out, x0, x_t, t, eps, schedule, vlb_weight)["loss"]


def sample_timesteps(batch: int, schedule: NoiseSchedule, generator: Optional[torch.Generator] = None) -> torch.Tensor:
    return torch.randint(0, schedule.T, (batch,), generator=generator)


def sample(
    lpet: torch.Tensor,
    ct: torch.Tensor,
    dose: torch.Tensor,
    model: NoisePredictor | Callable[..., ModelOut],
    schedule: NoiseSchedule,
    generator: Optional[torch.Generator] = None,
    progress: bool = False,
    return_trajectory: bool = False,
    clip_denoised: bool = False,
) -> torch.Tensor | tuple[torch.Tensor, list[torch.Tensor]]:
    """
    Reverse chain from pure noise. At every kept step the current x_t, the
    clean LPET condition, CT, the original step number and the dose go to the
    network; one network call per step.
    """
    if lpet.shape != ct.shape:
        raise DiffusionError(f"LPET {tuple(lpet.shape)} and CT {tuple(ct.shape)} differ")
    batch = lpet.shape[0]
    dose = torch.as_tensor(dose, dtype=lpet.dtype, device=lpet.device).reshape(-1).expand(batch)

    x = torch.randn(lpet.shape, generator=generator, dtype=lpet.dtype).to(lpet.device)
    trajectory: list[torch.Tensor] = []
    steps = tqdm(reversed(range(schedule.T)), total=schedule.T, desc="sampling", disable=not progress, leave=False)
    with torch.no_grad():
        for i in steps:
            t_model = torch.full((batch,), int(schedule.timesteps[i]), dtype=torch.long, device=lpet.device)
            out = model(x, lpet, ct, t_model, dose)
            if return_trajectory:
                trajectory.append(predict_x0_from_eps(x, i, out.eps_pred, schedule))
            x = p_step(out, x, i, schedule, generator, clip_denoised)
    if return_trajectory:
        return x, trajectory
    return x
