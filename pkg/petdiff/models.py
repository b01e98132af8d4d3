from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from enum import Enum as PyEnum
from pathlib import Path
from typing import Any, Optional

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, computed_field, field_validator, model_validator

# Standard-dose acquisition length; dose fractions are ratios of it.
STANDARD_ACQUISITION_SECONDS = 300.0
DATASET_FRACTIONS = (0.02, 0.05, 0.10, 0.20, 0.50, 1.00)
MIN_NETWORK_EXTENT = 8
# Smallest per-axis extent the dose-adaptive spatial branch accepts.
DAA_MIN_EXTENT = 4


class PetDiffError(Exception):
    """Base class for every error raised by petdiff"""
    pass


class VolumeError(PetDiffError, ValueError):
    """Raised when a volume violates its shape or finiteness invariants"""
    pass


class DoseError(PetDiffError, ValueError):
    """Raised for dose fractions outside (0, 1] or outside the dataset protocol"""
    pass


class Modality(PyEnum):
    PET = "PET"
    CT = "CT"


class Split(PyEnum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


@dataclass(frozen=True)
class Volume:
    """
    Dense (channels, depth, height, width) grid of finite float32 voxels.

    The array is copied on construction and marked read-only, so a Volume never
    changes after it is built. A 3D array is promoted to a single channel.
    """

    data: np.ndarray
    voxel_size_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self) -> None:
        arr = np.array(self.data, dtype=np.float32, copy=True)
        if arr.ndim == 3:
            arr = arr[None]
        if arr.ndim != 4:
            raise VolumeError(f"Volume needs (C, D, H, W) data, got {arr.ndim} dimensions")
        if min(arr.shape) < 1:
            raise VolumeError(f"Volume has an empty axis: {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise VolumeError("Volume contains NaN or Inf voxels")

        voxel = tuple(float(v) for v in self.voxel_size_mm)
        if len(voxel) != 3 or any(v <= 0 or not math.isfinite(v) for v in voxel):
            raise VolumeError(f"voxel_size_mm must be three positive reals, got {self.voxel_size_mm}")

        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "voxel_size_mm", voxel)

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return tuple(self.data.shape)  # type: ignore[return-value]

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def spatial_shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape[1:])  # type: ignore[return-value]

    def tensor(self, dtype: torch.dtype = torch.float32) -> torch.Tensor:
        """Copy of the voxels as a (C, D, H, W) tensor"""
        return torch.tensor(self.data, dtype=dtype)

    def with_data(self, data: np.ndarray | torch.Tensor) -> "Volume":
        """New volume with the same voxel size and different voxels"""
        if isinstance(data, torch.Tensor):
            data = data.detach().cpu().numpy()
        return Volume(data, self.voxel_size_mm)

    @classmethod
    def from_tensor(cls, tensor: torch.Tensor, voxel_size_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)) -> "Volume":
        return cls(tensor.detach().cpu().numpy(), voxel_size_mm)

    def check_network_shape(self, levels: int) -> None:
        validate_spatial_shape(self.spatial_shape, levels)


def validate_spatial_shape(spatial_shape: tuple[int, ...], levels: int) -> None:
    """Each axis must be at least 8 voxels and divisible by 2**levels"""
    factor = 2 ** levels
    for axis, extent in zip("DHW", spatial_shape):
        if extent < MIN_NETWORK_EXTENT:
            raise VolumeError(f"axis {axis} has {extent} voxels, need at least {MIN_NETWORK_EXTENT}")
        if extent % factor:
            raise VolumeError(f"axis {axis} has {extent} voxels, not divisible by 2**{levels}={factor}")


class DoseLevel(BaseModel):
    """Dose fraction relative to the 300 s standard acquisition"""

    model_config = ConfigDict(frozen=True)

    fraction: float

    @field_validator("fraction")
    @classmethod
    def _check_fraction(cls, value: float) -> float:
        if not math.isfinite(value) or not 0.0 < value <= 1.0:
            raise DoseError(f"dose fraction must lie in (0, 1], got {value}")
        return float(value)

    @computed_field  # type: ignore[misc]
    @property
    def seconds(self) -> float:
        return self.fraction * STANDARD_ACQUISITION_SECONDS

    @property
    def label(self) -> str:
        return f"{self.fraction * 100:g}%"

    @classmethod
    def for_dataset(cls, fraction: float) -> "DoseLevel":
        """Dose restricted to the fractions used when generating datasets"""
        if not any(math.isclose(fraction, f, rel_tol=0, abs_tol=1e-9) for f in DATASET_FRACTIONS):
            raise DoseError(f"dataset dose fraction must be one of {DATASET_FRACTIONS}, got {fraction}")
        return cls(fraction=fraction)


class SampleRecord(BaseModel):
    """One LPET/SPET/CT triple at a given dose, with paths relative to the dataset root"""

    id: str
    phantom_id: int
    lpet_path: str
    spet_path: str
    ct_path: str
    dose: DoseLevel
    seed: int
    split: Split

    @field_validator("seed")
    @classmethod
    def _check_seed(cls, value: int) -> int:
        if not 0 <= value < 2 ** 64:
            raise ValueError(f"seed must fit in 64 unsigned bits, got {value}")
        return value

    def paths(self, root: Path) -> tuple[Path, Path, Path]:
        """(lpet, spet, ct) resolved against the dataset root"""
        return root / self.lpet_path, root / self.spet_path, root / self.ct_path


def _ordered_range(name: str, value: tuple[float, float]) -> tuple[float, float]:
    lo, hi = value
    if lo > hi:
        raise ValueError(f"{name} range is reversed: {value}")
    return value


class PhantomSpec(BaseModel):
    """Template for one synthetic PET/CT phantom"""

    shape: tuple[int, int, int] = (48, 48, 48)
    voxel_size_mm: tuple[float, float, float] = (2.0, 2.0, 2.0)
    organ_count: tuple[int, int] = (2, 4)
    lesion_count: tuple[int, int] = (1, 3)
    bone_thickness: float = 2.0
    # CT tiers in Hounsfield units
    ct_air: tuple[float, float] = (-1000.0, -980.0)
    ct_soft_tissue: tuple[float, float] = (20.0, 60.0)
    ct_bone: tuple[float, float] = (700.0, 1000.0)
    # PET activity tiers in arbitrary concentration units
    pet_background: tuple[float, float] = (0.5, 1.0)
    pet_organ: tuple[float, float] = (1.5, 3.0)
    pet_lesion: tuple[float, float] = (4.0, 8.0)
    seed: int = 0

    @field_validator("shape")
    @classmethod
    def _check_shape(cls, value: tuple[int, int, int]) -> tuple[int, int, int]:
        for extent in value:
            if extent < MIN_NETWORK_EXTENT or extent % 2:
                raise ValueError(f"phantom extents must be even and >= {MIN_NETWORK_EXTENT}, got {value}")
        return value

    @model_validator(mode="after")
    def _check_tiers(self) -> "PhantomSpec":
        for name in ("ct_air", "ct_soft_tissue", "ct_bone", "pet_background", "pet_organ", "pet_lesion"):
            _ordered_range(name, getattr(self, name))
        if not (self.ct_air[1] < self.ct_soft_tissue[0] and self.ct_soft_tissue[1] < self.ct_bone[0]):
            raise ValueError("CT tiers must be ordered air < soft tissue < bone")
        if not (self.pet_background[1] < self.pet_organ[0] and self.pet_organ[1] < self.pet_lesion[0]):
            raise ValueError("PET tiers must be ordered background < organ < lesion")
        if self.pet_background[0] < 0:
            raise ValueError("PET activity cannot be negative")
        lo, hi = self.organ_count
        if lo < 1 or lo > hi:
            raise ValueError(f"organ_count must be an increasing range starting at >= 1, got {self.organ_count}")
        lo, hi = self.lesion_count
        if lo < 0 or lo > hi:
            raise ValueError(f"lesion_count must be an increasing non-negative range, got {self.lesion_count}")
        if self.bone_thickness <= 0:
            raise ValueError("bone_thickness must be positive")
        return self


class DoseProtocol(BaseModel):
    """Dose fractions to simulate and the count scale kappa at full dose for unit activity"""

    fractions: list[float] = [0.02, 0.05, 0.10, 0.20, 0.50]
    kappa: float = 50.0

    @field_validator("fractions")
    @classmethod
    def _check_fractions(cls, value: list[float]) -> list[float]:
        if not value:
            raise ValueError("dose protocol needs at least one fraction")
        for fraction in value:
            if not 0.0 < fraction <= 1.0:
                raise ValueError(f"dose fraction must lie in (0, 1], got {fraction}")
        return value

    @field_validator("kappa")
    @classmethod
    def _check_kappa(cls, value: float) -> float:
        if value <= 0:
            raise ValueError(f"kappa must be positive, got {value}")
        return value

    @classmethod
    def default(cls) -> "DoseProtocol":
        return cls()

    def levels(self) -> list[DoseLevel]:
        return [DoseLevel(fraction=f) for f in self.fractions]


def canonicalize_payload(payload: Optional[dict[str, Any]]) -> str:
    if payload is None:
        return "null"
    # Stable order
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def compute_payload_digest(payload: Optional[dict[str, Any]]) -> str:
    return hashlib.sha256(canonicalize_payload(payload).encode()).hexdigest()
