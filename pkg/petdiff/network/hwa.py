"""
CT-guided high-frequency wavelet attention (HWA).

PET and CT features are fused in the Haar domain; only the seven high bands
are touched, the PET low band passes through.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from ..models import PetDiffError
from ..utils.wavelet import haar_analysis, haar_synthesis
from .attention import SqueezeExcitation

HIGH_BANDS = 7


class HWAError(PetDiffError, ValueError):
    """Raised when PET and CT features cannot be fused"""
    pass


class HighFrequencyWaveletAttention(nn.Module):
    """
    CT-guided fusion of high-frequency wavelet bands.

    Both feature maps are split into Haar bands. The seven high bands of each
    side are stacked band-major along channels (7C), gated by one SE block per
    modality, concatenated (14C) and reduced back to 7C by a 1x1x1 conv. The PET
    low band goes straight to the inverse transform, so the block only ever
    changes high-frequency content. CT low-frequency content is dropped.
    """

    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        self.channels = channels
        stacked = HIGH_BANDS * channels
        self.pet_se = SqueezeExcitation(stacked, reduction)
        self.ct_se = SqueezeExcitation(stacked, reduction)
        self.fusion = nn.Conv3d(2 * stacked, stacked, kernel_size=1)

    def split(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(low band (B, C, ...), stacked high bands (B, 7C, ...))"""
        bands = haar_analysis(x).transpose(1, 2)  # (B, 8, C, d, h, w)
        low = bands[:, 0]
        high = bands[:, 1:].flatten(1, 2)
        return low, high

    def merge(self, low: torch.Tensor, high: torch.Tensor) -> torch.Tensor:
        b, _, d, h, w = high.shape
        high = high.reshape(b, HIGH_BANDS, self.channels, d, h, w)
        bands = torch.cat([low[:, None], high], dim=1).transpose(1, 2)
        return haar_synthesis(bands)

    def forward(self, pet: torch.Tensor, ct: torch.Tensor) -> torch.Tensor:
        if pet.shape != ct.shape:
            raise HWAError(f"PET features {tuple(pet.shape)} and CT features {tuple(ct.shape)} differ")
        if pet.dim() != 5 or pet.shape[1] != self.channels:
            raise HWAError(f"expected (B, {self.channels}, D, H, W) features, got {tuple(pet.shape)}")
        if any(extent % 2 for extent in pet.shape[2:]):
            raise HWAError(f"spatial extents must be even, got {tuple(pet.shape[2:])}")

        pet_low, pet_high = self.split(pet)
        _, ct_high = self.split(ct)
        fused = self.fusion(torch.cat([self.pet_se(pet_high), self.ct_se(ct_high)], dim=1))
        return self.merge(pet_low, fused)
