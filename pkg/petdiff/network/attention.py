"""
Channel and dose-conditioned attention blocks.

- SqueezeExcitation: per-channel gates from globally pooled features
- DoseEmbedding: MLP lifting the scalar dose fraction to a vector
- DAAChannel: dose-conditioned channel modulation, Norm(x) * (1 + alpha) + beta
- DAASpatial: spatial gating from channel-wise mean and max maps
- DoseAdaptiveAttention: the two branches in sequence
"""

from __future__ import annotations

from typing import Literal

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..models import DAA_MIN_EXTENT, PetDiffError

NORM_EPS = 1e-5


class AttentionError(PetDiffError, ValueError):
    """Raised when features do not match the attention block they are fed to"""
    pass


def _check_features(x: torch.Tensor, channels: int, block: str) -> None:
    if x.dim() != 5:
        raise AttentionError(f"{block} expects (B, C, D, H, W) features, got shape {tuple(x.shape)}")
    if x.shape[1] != channels:
        raise AttentionError(f"{block} built for {channels} channels, got {x.shape[1]}")


class SqueezeExcitation(nn.Module):
    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        if channels % reduction:
            raise AttentionError(f"reduction {reduction} must divide {channels} channels")
        self.channels = channels
        self.reduce = nn.Linear(channels, channels // reduction)
        self.expand = nn.Linear(channels // reduction, channels)

    def weights(self, x: torch.Tensor) -> torch.Tensor:
        """(B, C) gates in (0, 1)"""
        _check_features(x, self.channels, "SqueezeExcitation")
        pooled = x.mean(dim=(2, 3, 4))
        return torch.sigmoid(self.expand(F.relu(self.reduce(pooled))))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.weights(x)[:, :, None, None, None]


class DoseEmbedding(nn.Module):
    def __init__(self, embed_dim: int = 64):
        super().__init__()
        self.embed_dim = embed_dim
        self.mlp = nn.Sequential(
            nn.Linear(1, embed_dim),
            nn.SiLU(),
            nn.Linear(embed_dim, embed_dim),
        )

    def forward(self, dose: torch.Tensor) -> torch.Tensor:
        """(B,) dose fractions in (0, 1] -> (B, E)"""
        dose = dose.reshape(-1)
        if not torch.all((dose > 0) & (dose <= 1)):
            raise AttentionError(f"dose fractions must lie in (0, 1], got {dose.tolist()}")
        return self.mlp(dose[:, None].to(self.mlp[0].weight.dtype))


class DAAChannel(nn.Module):
    """
    Channel branch. The descriptor concat(avgpool(x), maxpool(x), emb) feeds a
    1x1x1 conv (W1) and ReLU; W2 gives the sigmoid channel weights, and two
    heads give alpha and beta, both gated by those weights.
    """

    def __init__(self, channels: int, embed_dim: int = 64, hidden: int | None = None):
        super().__init__()
        hidden = hidden or max(channels, 8)
        self.channels = channels
        self.embed_dim = embed_dim
        self.w1 = nn.Conv3d(2 * channels + embed_dim, hidden, kernel_size=1)
        self.w2 = nn.Conv3d(hidden, channels, kernel_size=1)
        self.alpha_head = nn.Conv3d(hidden, channels, kernel_size=1)
        self.beta_head = nn.Conv3d(hidden, channels, kernel_size=1)

    def zero_init_heads(self) -> None:
        for head in (self.alpha_head, self.beta_head):
            nn.init.zeros_(head.weight)
            nn.init.zeros_(head.bias)

    def modulation(self, x: torch.Tensor, emb: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """(channel weights, alpha, beta), each (B, C, 1, 1, 1)"""
        _check_features(x, self.channels, "DAAChannel")
        if emb.dim() != 2 or emb.shape != (x.shape[0], self.embed_dim):
            raise AttentionError(f"dose embedding must be (B, {self.embed_dim}), got {tuple(emb.shape)}")
        avg = x.mean(dim=(2, 3, 4))
        peak = x.amax(dim=(2, 3, 4))
        descriptor = torch.cat([avg, peak, emb.to(x.dtype)], dim=1)[:, :, None, None, None]
        hidden = F.relu(self.w1(descriptor))
        channel_weights = torch.sigmoid(self.w2(hidden))
        alpha = self.alpha_head(hidden) * channel_weights
        beta = self.beta_head(hidden) * channel_weights
        return channel_weights, alpha, beta

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        _, alpha, beta = self.modulation(x, emb)
        return F.instance_norm(x, eps=NORM_EPS) * (1 + alpha) + beta


class DAASpatial(nn.Module):
    """Spatial branch: 3x3x3 conv then 3x3x3 conv with dilation 2, on [mean, max] maps"""

    def __init__(self, min_extent: int = DAA_MIN_EXTENT):
        super().__init__()
        self.min_extent = min_extent
        self.conv = nn.Sequential(
            nn.Conv3d(2, 2, kernel_size=3, padding=1),
            nn.Conv3d(2, 1, kernel_size=3, padding=2, dilation=2),
        )

    def attention_map(self, x: torch.Tensor) -> torch.Tensor:
        """(B, 1, D, H, W) map in (0, 1)"""
        if x.dim() != 5:
            raise AttentionError(f"DAASpatial expects (B, C, D, H, W) features, got shape {tuple(x.shape)}")
        if min(x.shape[2:]) < self.min_extent:
            raise AttentionError(f"spatial extent {tuple(x.shape[2:])} below the minimum of {self.min_extent}")
        pooled = torch.cat([x.mean(dim=1, keepdim=True), x.amax(dim=1, keepdim=True)], dim=1)
        return torch.sigmoid(self.conv(pooled))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.attention_map(x)


class DoseAdaptiveAttention(nn.Module):
    def __init__(
        self,
        channels: int,
        embed_dim: int = 64,
        order: Literal["channel_first", "spatial_first"] = "channel_first",
    ):
        super().__init__()
        if order not in ("channel_first", "spatial_first"):
            raise AttentionError(f"unknown branch order {order!r}")
        self.order = order
        self.dose_embedding = DoseEmbedding(embed_dim)
        self.channel = DAAChannel(channels, embed_dim)
        self.spatial = DAASpatial()

    def forward(self, x: torch.Tensor, dose: torch.Tensor) -> torch.Tensor:
        emb = self.dose_embedding(dose)
        if self.order == "channel_first":
            return self.spatial(self.channel(x, emb))
        return self.channel(self.spatial(x), emb)
