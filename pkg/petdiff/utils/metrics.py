"""
Image quality metrics for PET volumes: PSNR and windowed 3D SSIM.
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from ..models import PetDiffError, Volume

PSNR_CAP_DB = 100.0
SSIM_WINDOW = 7
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


class MetricError(PetDiffError, ValueError):
    """Raised for metric inputs that do not match or cannot be scored"""
    pass


def _as_array(x: Volume | np.ndarray) -> np.ndarray:
    arr = x.data if isinstance(x, Volume) else np.asarray(x)
    arr = arr.astype(np.float64)
    if not np.all(np.isfinite(arr)):
        raise MetricError("metric input contains NaN or Inf")
    return arr


def _pair(pred: Volume | np.ndarray, ref: Volume | np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    p, r = _as_array(pred), _as_array(ref)
    if p.shape != r.shape:
        raise MetricError(f"shape mismatch: {p.shape} vs {r.shape}")
    return p, r


def _data_range(ref: np.ndarray, data_range: Optional[float]) -> float:
    if data_range is None:
        data_range = float(ref.max() - ref.min())
    if not data_range > 0:
        raise MetricError(f"data_range must be positive, got {data_range}")
    return float(data_range)


def psnr(pred: Volume | np.ndarray, ref: Volume | np.ndarray, data_range: Optional[float] = None) -> float:
    """
    Peak signal-to-noise ratio in dB.

    `data_range` defaults to max(ref) - min(ref). Identical inputs score the
    100 dB cap.
    """
    p, r = _pair(pred, ref)
    mse = float(np.mean((p - r) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    peak = _data_range(r, data_range)
    return 10.0 * math.log10(peak ** 2 / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> torch.Tensor:
    """Normalized 1D Gaussian taps, float64"""
    coords = torch.arange(size, dtype=torch.float64) - (size - 1) / 2.0
    taps = torch.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    return taps / taps.sum()


def _local_mean(x: torch.Tensor, taps: torch.Tensor) -> torch.Tensor:
    # separable valid filtering along D, H, W
    size = taps.numel()
    x = F.conv3d(x, taps.view(1, 1, size, 1, 1))
    x = F.conv3d(x, taps.view(1, 1, 1, size, 1))
    return F.conv3d(x, taps.view(1, 1, 1, 1, size))


def ssim(
    pred: Volume | np.ndarray,
    ref: Volume | np.ndarray,
    data_range: Optional[float] = None,
    window: int = SSIM_WINDOW,
    sigma: float = SSIM_SIGMA,
) -> float:
    """
    Mean local SSIM over every position of a Gaussian window fully inside the
    volume. Channels are scored independently and averaged.
    """
    p, r = _pair(pred, ref)
    if p.ndim == 3:
        p, r = p[None], r[None]
    if p.ndim != 4:
        raise MetricError(f"ssim expects (C, D, H, W) volumes, got {p.ndim} dimensions")
    if min(p.shape[1:]) < window:
        raise MetricError(f"volume {p.shape[1:]} is smaller than the {window}^3 SSIM window")

    peak = _data_range(r, data_range) if not np.array_equal(p, r) else 1.0
    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2

    taps = gaussian_window(window, sigma)
    x = torch.from_numpy(p)[:, None]
    y = torch.from_numpy(r)[:, None]
    mu_x = _local_mean(x, taps)
    mu_y = _local_mean(y, taps)
    var_x = _local_mean(x * x, taps) - mu_x ** 2
    var_y = _local_mean(y * y, taps) - mu_y ** 2
    cov = _local_mean(x * y, taps) - mu_x * mu_y

    numerator = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    denominator = (mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2)
    return float((numerator / denominator).mean())
