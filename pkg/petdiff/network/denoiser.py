"""
PET/CT conditional encoder-decoder for noise prediction.

The PET stream encodes concat(x_t, LPET). A lighter CT stream mirrors its
scales, and at every encoder level the PET features are fused with the CT
features through high-frequency wavelet attention; the fused features are
the skip connections. Dose-adaptive attention runs at the bottleneck and at
each decoder level. A 1x1x1 head emits eps and the variance weight v.
"""

from __future__ import annotations

import math
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..config import DenoiserConfig
from ..diffusion import ModelOut
from ..logging_config import get_logger
from ..models import PetDiffError, VolumeError, validate_spatial_shape
from .attention import DAA_MIN_EXTENT, DoseAdaptiveAttention
from .hwa import HighFrequencyWaveletAttention

logger = get_logger("network.denoiser")

MAX_PERIOD = 10000.0


class DenoiserError(PetDiffError, ValueError):
    """Raised for inputs the network cannot take or non-finite activations"""
    pass


def sinusoidal_embedding(t: torch.Tensor, dim: int, max_period: float = MAX_PERIOD) -> torch.Tensor:
    """(B,) step indices -> (B, dim) as [sin(t * f_k), cos(t * f_k)] over geometric frequencies f_k"""
    if dim % 2:
        raise DenoiserError(f"timestep embedding width must be even, got {dim}")
    t = torch.as_tensor(t).reshape(-1)
    if torch.any(t < 0):
        raise DenoiserError("timesteps must be non-negative")
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64, device=t.device) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class TimestepEmbedding(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        if dim % 2:
            raise DenoiserError(f"timestep embedding width must be even, got {dim}")
        self.dim = dim
        self.mlp = nn.Sequential(
            nn.Linear(dim, dim),
            nn.SiLU(),
            nn.Linear(dim, dim),
        )

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        emb = sinusoidal_embedding(t, self.dim)
        return self.mlp(emb.to(self.mlp[0].weight.dtype))


def _norm(channels: int, groups: int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(groups, channels), channels)


class ResBlock(nn.Module):
    """GroupNorm-SiLU-Conv twice, with the timestep embedding added after the first conv"""

    def __init__(self, in_ch: int, out_ch: int, time_dim: Optional[int] = None, groups: int = 8):
        super().__init__()
        self.norm1 = _norm(in_ch, groups)
        self.conv1 = nn.Conv3d(in_ch, out_ch, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_ch) if time_dim else None
        self.norm2 = _norm(out_ch, groups)
        self.conv2 = nn.Conv3d(out_ch, out_ch, 3, padding=1)
        self.shortcut = nn.Conv3d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, temb: Optional[torch.Tensor] = None) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        if self.time_proj is not None and temb is not None:
            h = h + self.time_proj(F.silu(temb))[:, :, None, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.shortcut(x)


class Downsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv3d(channels, channels, 3, stride=2, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.up = nn.ConvTranspose3d(in_ch, out_ch, 2, stride=2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.up(x)


class CTEncoder(nn.Module):
    """
    Half-width mirror of the PET encoder. Each level's features are projected
    to the PET width so they can be fused band by band.
    """

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        widths = [c // 2 for c in config.level_channels()]
        self.stem = nn.Conv3d(1, widths[0], 3, padding=1)
        self.downs = nn.ModuleList([Downsample(widths[i - 1]) for i in range(1, len(widths))])
        self.blocks = nn.ModuleList(
            [ResBlock(widths[max(i - 1, 0)], w, groups=config.norm_groups) for i, w in enumerate(widths)]
        )
        self.projections = nn.ModuleList(
            [nn.Conv3d(w, c, 1) for w, c in zip(widths, config.level_channels())]
        )

    def forward(self, ct: torch.Tensor) -> list[torch.Tensor]:
        h = self.stem(ct)
        features = []
        for level, block in enumerate(self.blocks):
            if level > 0:
                h = self.downs[level - 1](h)
            h = block(h)
            features.append(self.projections[level](h))
        return features


class Denoiser(nn.Module):
    def __init__(self, config: Optional[DenoiserConfig] = None):
        super().__init__()
        self.config = config or DenoiserConfig()
        cfg = self.config
        channels = cfg.level_channels()
        time_dim = cfg.time_embed_dim
        groups = cfg.norm_groups

        self.time_embedding = TimestepEmbedding(time_dim)

        # PET encoder
        self.stem = nn.Conv3d(2, channels[0], 3, padding=1)
        self.downs = nn.ModuleList([Downsample(channels[i - 1]) for i in range(1, len(channels))])
        self.encoder = nn.ModuleList(
            [ResBlock(channels[max(i - 1, 0)], c, time_dim, groups) for i, c in enumerate(channels)]
        )

        # CT guidance
        self.ct_encoder = CTEncoder(cfg) if cfg.use_hwa else None
        self.hwa = nn.ModuleList(
            [HighFrequencyWaveletAttention(c, cfg.se_reduction) for c in channels] if cfg.use_hwa else []
        )

        # Bottleneck
        deepest = channels[-1]
        self.mid1 = ResBlock(deepest, deepest, time_dim, groups)
        self.mid2 = ResBlock(deepest, deepest, time_dim, groups)
        self.daa_mid = (
            DoseAdaptiveAttention(deepest, cfg.dose_embed_dim, cfg.daa_order)
            if cfg.use_daa and cfg.daa_at_bottleneck
            else None
        )

        # Decoder, deepest level first
        self.decoder = nn.ModuleList([ResBlock(2 * c, c, time_dim, groups) for c in reversed(channels)])
        self.daa_dec = nn.ModuleList(
            [DoseAdaptiveAttention(c, cfg.dose_embed_dim, cfg.daa_order) for c in reversed(channels)]
            if cfg.use_daa and cfg.daa_at_decoder
            else []
        )
        self.ups = nn.ModuleList(
            [Upsample(channels[i], channels[i - 1]) for i in range(len(channels) - 1, 0, -1)]
        )

        self.out_norm = _norm(channels[0], groups)
        self.head = nn.Conv3d(channels[0], 2, 1)

    def zero_head(self) -> None:
        """eps = 0 and v = 0.5 for every input"""
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def parameter_groups(self) -> dict[str, int]:
        """Parameter counts of the backbone, CT encoder, HWA and DAA parts"""
        groups = {"backbone": 0, "ct_encoder": 0, "hwa": 0, "daa": 0}
        for name, param in self.named_parameters():
            if name.startswith("ct_encoder."):
                groups["ct_encoder"] += param.numel()
            elif name.startswith("hwa."):
                groups["hwa"] += param.numel()
            elif name.startswith(("daa_mid.", "daa_dec.")):
                groups["daa"] += param.numel()
            else:
                groups["backbone"] += param.numel()
        return groups

    def _check_inputs(self, x_t: torch.Tensor, lpet: torch.Tensor, ct: torch.Tensor, t: torch.Tensor, dose: torch.Tensor) -> None:
        if x_t.dim() != 5 or x_t.shape[1] != 1:
            raise DenoiserError(f"x_t must be (B, 1, D, H, W), got {tuple(x_t.shape)}")
        if lpet.shape != x_t.shape or ct.shape != x_t.shape:
            raise DenoiserError(
                f"x_t {tuple(x_t.shape)}, LPET {tuple(lpet.shape)} and CT {tuple(ct.shape)} must share one shape"
            )
        try:
            validate_spatial_shape(tuple(x_t.shape[2:]), self.config.levels)
        except VolumeError as e:
            raise DenoiserError(str(e)) from e
        if (self.daa_mid is not None or len(self.daa_dec)) and min(x_t.shape[2:]) // 2 ** (self.config.levels - 1) < DAA_MIN_EXTENT:
            raise DenoiserError(
                f"dose-adaptive attention needs at least {DAA_MIN_EXTENT} voxels per axis at the deepest level, "
                f"got {tuple(x_t.shape[2:])} with {self.config.levels} levels"
            )
        batch = x_t.shape[0]
        if t.numel() != batch or dose.numel() != batch:
            raise DenoiserError(f"need one timestep and one dose per sample, got {t.numel()} and {dose.numel()} for {batch}")

    def forward(
        self,
        x_t: torch.Tensor,
        lpet: torch.Tensor,
        ct: torch.Tensor,
        t: torch.Tensor,
        dose: torch.Tensor,
    ) -> ModelOut:
        t = torch.as_tensor(t, device=x_t.device).reshape(-1)
        dose = torch.as_tensor(dose, device=x_t.device).reshape(-1)
        self._check_inputs(x_t, lpet, ct, t, dose)

        temb = self.time_embedding(t)
        ct_features = self.ct_encoder(ct) if self.ct_encoder is not None else None

        h = self.stem(torch.cat([x_t, lpet], dim=1))
        skips = []
        for level, block in enumerate(self.encoder):
            if level > 0:
                h = self.downs[level - 1](h)
            h = block(h, temb)
            if ct_features is not None:
                h = self.hwa[level](h, ct_features[level])
            skips.append(h)

        h = self.mid1(h, temb)
        if self.daa_mid is not None:
            h = self.daa_mid(h, dose)
        h = self.mid2(h, temb)

        for i, block in enumerate(self.decoder):
            h = block(torch.cat([h, skips[-1 - i]], dim=1), temb)
            if len(self.daa_dec):
                h = self.daa_dec[i](h, dose)
            if i < len(self.ups):
                h = self.ups[i](h)

        out = self.head(F.silu(self.out_norm(h)))
        if not torch.isfinite(out).all():
            raise DenoiserError("non-finite activations in the denoiser output")
        eps_pred, raw_v = out[:, :1], out[:, 1:]
        return ModelOut(eps_pred=eps_pred, v_pred=(torch.tanh(raw_v) + 1) / 2)


def build_denoiser(config: DenoiserConfig, seed: Optional[int] = None) -> Denoiser:
    if seed is not None:
        torch.manual_seed(seed)
    model = Denoiser(config)
    groups = model.parameter_groups()
    logger.debug(f"Built denoiser: {groups} (use_hwa={config.use_hwa}, use_daa={config.use_daa})")
    return model
