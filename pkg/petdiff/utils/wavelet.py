"""
One-level separable orthonormal Haar transform in 3D.

Band labels read axis by axis in (D, H, W) order: `LLH` is low-pass along D
and H, high-pass along W. The tensor functions work on any leading shape and
are differentiable, the Volume functions wrap them for whole volumes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from ..models import PetDiffError, Volume

BAND_LABELS = ("LLL", "LLH", "LHL", "LHH", "HLL", "HLH", "HHL", "HHH")
HIGH_BAND_LABELS = BAND_LABELS[1:]
FAMILIES = ("haar",)

_INV_SQRT2 = 1.0 / math.sqrt(2.0)


class WaveletError(PetDiffError, ValueError):
    """Raised for odd extents or incomplete band sets"""
    pass


def _split(x: torch.Tensor, dim: int) -> tuple[torch.Tensor, torch.Tensor]:
    pairs = x.unflatten(dim, (x.shape[dim] // 2, 2))
    pair_dim = dim if dim < 0 else dim + 1
    even, odd = pairs.select(pair_dim, 0), pairs.select(pair_dim, 1)
    return (even + odd) * _INV_SQRT2, (even - odd) * _INV_SQRT2


def _merge(low: torch.Tensor, high: torch.Tensor, dim: int) -> torch.Tensor:
    even = (low + high) * _INV_SQRT2
    odd = (low - high) * _INV_SQRT2
    return torch.stack([even, odd], dim=dim).flatten(dim - 1, dim)


def haar_analysis(x: torch.Tensor) -> torch.Tensor:
    """(..., D, H, W) -> (..., 8, D/2, H/2, W/2), bands ordered as BAND_LABELS"""
    if x.dim() < 3:
        raise WaveletError(f"need at least three spatial axes, got shape {tuple(x.shape)}")
    if any(extent % 2 for extent in x.shape[-3:]):
        raise WaveletError(f"spatial extents must be even, got {tuple(x.shape[-3:])}")

    bands: dict[int, torch.Tensor] = {}
    for w_bit, xw in enumerate(_split(x, -1)):
        for h_bit, xh in enumerate(_split(xw, -2)):
            for d_bit, xd in enumerate(_split(xh, -3)):
                bands[4 * d_bit + 2 * h_bit + w_bit] = xd
    return torch.stack([bands[i] for i in range(8)], dim=-4)


def haar_synthesis(bands: torch.Tensor) -> torch.Tensor:
    """Inverse of haar_analysis"""
    if bands.dim() < 4 or bands.shape[-4] != 8:
        raise WaveletError(f"expected (..., 8, d, h, w) bands, got shape {tuple(bands.shape)}")

    def band(d_bit: int, h_bit: int, w_bit: int) -> torch.Tensor:
        return bands.select(-4, 4 * d_bit + 2 * h_bit + w_bit)

    halves = []
    for w_bit in (0, 1):
        rows = [_merge(band(0, h_bit, w_bit), band(1, h_bit, w_bit), -3) for h_bit in (0, 1)]
        halves.append(_merge(rows[0], rows[1], -2))
    return _merge(halves[0], halves[1], -1)


@dataclass(frozen=True)
class WaveletBands:
    bands: dict[str, Volume]
    original_shape: tuple[int, int, int, int]
    family: str = "haar"

    def __post_init__(self) -> None:
        if self.family not in FAMILIES:
            raise WaveletError(f"unsupported wavelet family {self.family!r}")
        missing = [label for label in BAND_LABELS if label not in self.bands]
        if missing:
            raise WaveletError(f"missing bands: {missing}")
        extra = sorted(set(self.bands) - set(BAND_LABELS))
        if extra:
            raise WaveletError(f"unknown bands: {extra}")
        c, d, h, w = self.original_shape
        expected = (c, d // 2, h // 2, w // 2)
        for label in BAND_LABELS:
            if self.bands[label].shape != expected:
                raise WaveletError(f"band {label} has shape {self.bands[label].shape}, expected {expected}")

    @property
    def low(self) -> Volume:
        return self.bands["LLL"]

    @property
    def high(self) -> list[Volume]:
        return [self.bands[label] for label in HIGH_BAND_LABELS]

    def energy(self) -> float:
        return float(sum((band.data.astype("float64") ** 2).sum() for band in self.bands.values()))


def dwt3(volume: Volume) -> WaveletBands:
    """Split a volume into its eight Haar subbands, channel by channel"""
    coefficients = haar_analysis(volume.tensor(torch.float64))
    voxel = tuple(2 * s for s in volume.voxel_size_mm)
    bands = {
        label: Volume(coefficients[:, i].numpy(), voxel)  # type: ignore[arg-type]
        for i, label in enumerate(BAND_LABELS)
    }
    return WaveletBands(bands=bands, original_shape=volume.shape)


def idwt3(bands: WaveletBands) -> Volume:
    """Reassemble the volume from a complete band set"""
    stacked = torch.stack([bands.bands[label].tensor(torch.float64) for label in BAND_LABELS], dim=1)
    voxel = tuple(s / 2 for s in bands.low.voxel_size_mm)
    return Volume(haar_synthesis(stacked).numpy(), voxel)  # type: ignore[arg-type]
