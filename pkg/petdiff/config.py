from __future__ import annotations

from pathlib import Path
from typing import Literal

from pydantic import BaseModel, Field, field_validator, model_validator
from pydantic_settings import BaseSettings

from .models import DAA_MIN_EXTENT, DoseProtocol, PetDiffError, PhantomSpec

VARIANTS = ("iddpm", "iddpm+hwa", "full")


class ConfigError(PetDiffError, ValueError):
    """Raised when a run configuration cannot be loaded or is inconsistent"""
    pass


class Settings(BaseSettings):
    env: str = "development"

    # Logging
    log_dir: str = "logs"
    log_to_file: bool = True

    # Compute
    device: str = "cpu"
    num_threads: int | None = None

    # Default locations for generated datasets and training runs
    data_root: str = "local_storage/datasets"
    runs_root: str = "local_storage/runs"

    class Config:
        env_file = ".env"
        env_prefix = "PETDIFF_"
        case_sensitive = False


settings = Settings()


class DenoiserConfig(BaseModel):
    base_channels: int = 16
    channel_mult: list[int] = [1, 2, 4]
    dose_embed_dim: int = 64
    time_embed_dim: int = 64
    se_reduction: int = 4
    norm_groups: int = 8
    use_hwa: bool = True
    use_daa: bool = True
    daa_order: Literal["channel_first", "spatial_first"] = "channel_first"
    daa_at_bottleneck: bool = True
    daa_at_decoder: bool = True

    @property
    def levels(self) -> int:
        return len(self.channel_mult)

    def level_channels(self) -> list[int]:
        return [self.base_channels * m for m in self.channel_mult]

    @model_validator(mode="after")
    def _check(self) -> "DenoiserConfig":
        if not self.channel_mult:
            raise ValueError("channel_mult needs at least one level")
        if self.base_channels % 2:
            raise ValueError("base_channels must be even so the CT encoder can use half of it")
        if self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be even")
        for channels in self.level_channels():
            if (7 * channels) % self.se_reduction:
                raise ValueError(f"se_reduction {self.se_reduction} must divide the 7*{channels} stacked high bands")
        return self

    @classmethod
    def for_variant(cls, variant: str, **overrides) -> "DenoiserConfig":
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}, expected one of {VARIANTS}")
        flags = {
            "iddpm": {"use_hwa": False, "use_daa": False},
            "iddpm+hwa": {"use_hwa": True, "use_daa": False},
            "full": {"use_hwa": True, "use_daa": True},
        }[variant]
        return cls(**{**overrides, **flags})


class RunConfig(BaseModel):
    """Everything one training / evaluation / ablation run needs, stored as JSON"""

    dataset: str = Field(default_factory=lambda: str(Path(settings.data_root) / "phantoms"))
    out: str = Field(default_factory=lambda: str(Path(settings.runs_root) / "default"))
    variant: str = "full"
    denoiser: DenoiserConfig = DenoiserConfig()
    phantom: PhantomSpec = PhantomSpec()
    protocol: DoseProtocol = DoseProtocol()
    n_phantoms: int = 100
    split_ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)

    # Diffusion
    timesteps: int = 1000
    sampling_steps: int = 50
    vlb_weight: float = 0.001

    # Optimisation
    lr: float = 1e-4
    lr_min: float = 1e-6
    weight_decay: float = 0.0
    batch_size: int = 4
    steps: int = 20000
    crop_size: int = 32

    # Intensity normalisation to [-1, 1]
    pet_scale: float = 8.0
    ct_window: tuple[float, float] = (-1000.0, 1000.0)

    # Bookkeeping
    seed: int = 0
    data_seed: int = 0
    log_every: int = 100
    checkpoint_every: int = 5000
    val_every: int = 5000
    val_records: int = 2
    eval_workers: int = 1

    @field_validator("variant")
    @classmethod
    def _check_variant(cls, value: str) -> str:
        if value not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {value!r}")
        return value

    @model_validator(mode="after")
    def _check(self) -> "RunConfig":
        if self.timesteps < 2:
            raise ValueError("timesteps must be at least 2")
        if not 1 <= self.sampling_steps <= self.timesteps:
            raise ValueError(f"sampling_steps must lie in [1, timesteps], got {self.sampling_steps}")
        factor = 2 ** self.denoiser.levels
        if self.crop_size % factor or self.crop_size < 8:
            raise ValueError(f"crop_size {self.crop_size} must be >= 8 and divisible by 2**levels={factor}")
        if any(self.crop_size > extent for extent in self.phantom.shape):
            raise ValueError(f"crop_size {self.crop_size} exceeds phantom shape {self.phantom.shape}")
        if any(extent % factor for extent in self.phantom.shape):
            raise ValueError(
                f"phantom shape {self.phantom.shape} must be divisible by 2**levels={factor} for whole-volume sampling"
            )
        # every variant: ablations retrain this config as full
        daa = self.denoiser.daa_at_bottleneck or self.denoiser.daa_at_decoder
        if daa and self.crop_size // (factor // 2) < DAA_MIN_EXTENT:
            raise ValueError(
                f"crop_size {self.crop_size} leaves fewer than {DAA_MIN_EXTENT} voxels at the deepest level"
            )
        if abs(sum(self.split_ratios) - 1.0) > 1e-6 or min(self.split_ratios) < 0:
            raise ValueError(f"split_ratios must be non-negative and sum to 1, got {self.split_ratios}")
        if self.ct_window[0] >= self.ct_window[1]:
            raise ValueError("ct_window must be increasing")
        if self.pet_scale <= 0:
            raise ValueError("pet_scale must be positive")
        return self

    def network_config(self) -> DenoiserConfig:
        """Denoiser config with the HWA/DAA flags implied by the ablation variant"""
        return DenoiserConfig.for_variant(self.variant, **self.denoiser.model_dump(exclude={"use_hwa", "use_daa"}))

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        try:
            return cls.model_validate_json(path.read_text())
        except FileNotFoundError as e:
            raise ConfigError(f"config file not found: {path}") from e
        except ValueError as e:
            raise ConfigError(f"invalid config {path}: {e}") from e

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.model_dump_json(indent=2) + "\n")
        return path
