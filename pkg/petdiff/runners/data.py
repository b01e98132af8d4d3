"""
Training and evaluation data plumbing: intensity normalisation, a record
volume cache and the deterministic aligned-crop batch sampler.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from threading import Lock
from typing import Iterable, Optional

import numpy as np
import torch

from ..config import RunConfig
from ..logging_config import get_logger
from ..models import DoseLevel, SampleRecord, Split, Volume
from ..storage import StorageError, load_record_volumes, read_manifest

logger = get_logger("runners.data")


@dataclass(frozen=True)
class Normalizer:
    """Maps PET activity and CT HU to [-1, 1] and PET back"""

    pet_scale: float = 8.0
    ct_window: tuple[float, float] = (-1000.0, 1000.0)

    @classmethod
    def from_config(cls, config: RunConfig) -> "Normalizer":
        return cls(pet_scale=config.pet_scale, ct_window=tuple(config.ct_window))  # type: ignore[arg-type]

    def pet(self, x: np.ndarray) -> np.ndarray:
        return 2.0 * x / self.pet_scale - 1.0

    def pet_inverse(self, x: np.ndarray) -> np.ndarray:
        return (x + 1.0) * self.pet_scale / 2.0

    def ct(self, x: np.ndarray) -> np.ndarray:
        lo, hi = self.ct_window
        return 2.0 * (np.clip(x, lo, hi) - lo) / (hi - lo) - 1.0


@dataclass
class Batch:
    lpet: torch.Tensor
    spet: torch.Tensor
    ct: torch.Tensor
    dose: torch.Tensor
    ids: list[str]

    def to(self, device: torch.device) -> "Batch":
        return Batch(self.lpet.to(device), self.spet.to(device), self.ct.to(device), self.dose.to(device), self.ids)


def select_records(
    records: Iterable[SampleRecord],
    split: Optional[Split] = None,
    doses: Optional[Iterable[float]] = None,
) -> list[SampleRecord]:
    doses = list(doses) if doses is not None else None
    selected = []
    for record in records:
        if split is not None and record.split != split:
            continue
        if doses is not None and not any(abs(record.dose.fraction - d) < 1e-9 for d in doses):
            continue
        selected.append(record)
    return selected


def load_split(root: str | Path, split: Split, doses: Optional[Iterable[float]] = None) -> list[SampleRecord]:
    records = select_records(read_manifest(Path(root)), split, doses)
    if not records:
        raise StorageError(f"manifest has no {split.value} records", Path(root))
    return records


class VolumeCache:
    """Loads (lpet, spet, ct) per record once; thread-safe"""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self._volumes: dict[str, tuple[Volume, Volume, Volume]] = {}
        self._lock = Lock()

    def get(self, record: SampleRecord) -> tuple[Volume, Volume, Volume]:
        with self._lock:
            cached = self._volumes.get(record.id)
        if cached is not None:
            return cached
        volumes = load_record_volumes(self.root, record)
        with self._lock:
            self._volumes[record.id] = volumes
        return volumes

    def preload(self, records: list[SampleRecord], workers: int = 4) -> None:
        with ThreadPoolExecutor(max_workers=max(workers, 1)) as pool:
            list(pool.map(self.get, records))
        logger.debug(f"Cached {len(self._volumes)} records from {self.root}")


class PatchSampler:
    """
    Draws batches of aligned cubic crops. All randomness comes from one
    generator seeded with `data_seed`, so the batch stream is identical for
    every model trained on the same config.
    """

    def __init__(
        self,
        records: list[SampleRecord],
        cache: VolumeCache,
        normalizer: Normalizer,
        crop_size: int,
        batch_size: int,
        data_seed: int,
        align: int = 1,
    ):
        if not records:
            raise ValueError("PatchSampler needs at least one record")
        self.records = records
        self.cache = cache
        self.normalizer = normalizer
        self.crop_size = crop_size
        self.batch_size = batch_size
        self.align = align
        self.rng = np.random.default_rng(data_seed)

    def _origin(self, extent: int) -> int:
        slots = (extent - self.crop_size) // self.align
        return int(self.rng.integers(0, slots + 1)) * self.align

    def crop(self, record: SampleRecord, origin: tuple[int, int, int]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        lpet, spet, ct = self.cache.get(record)
        window = (slice(None),) + tuple(slice(o, o + self.crop_size) for o in origin)
        return (
            self.normalizer.pet(lpet.data[window]),
            self.normalizer.pet(spet.data[window]),
            self.normalizer.ct(ct.data[window]),
        )

    def next_batch(self) -> Batch:
        picks = self.rng.integers(0, len(self.records), size=self.batch_size)
        lpets, spets, cts, doses, ids = [], [], [], [], []
        for index in picks:
            record = self.records[int(index)]
            _, spet, _ = self.cache.get(record)
            origin = tuple(self._origin(extent) for extent in spet.spatial_shape)
            lpet, spet_crop, ct = self.crop(record, origin)  # type: ignore[arg-type]
            lpets.append(lpet)
            spets.append(spet_crop)
            cts.append(ct)
            doses.append(record.dose.fraction)
            ids.append(record.id)
        return Batch(
            lpet=torch.from_numpy(np.stack(lpets)).float(),
            spet=torch.from_numpy(np.stack(spets)).float(),
            ct=torch.from_numpy(np.stack(cts)).float(),
            dose=torch.tensor(doses, dtype=torch.float32),
            ids=ids,
        )

    def center_batch(self, records: list[SampleRecord]) -> Batch:
        """Centred crops of the given records, for validation"""
        lpets, spets, cts, doses = [], [], [], []
        for record in records:
            _, spet, _ = self.cache.get(record)
            origin = tuple(((extent - self.crop_size) // 2 // self.align) * self.align for extent in spet.spatial_shape)
            lpet, spet_crop, ct = self.crop(record, origin)  # type: ignore[arg-type]
            lpets.append(lpet)
            spets.append(spet_crop)
            cts.append(ct)
            doses.append(record.dose.fraction)
        return Batch(
            lpet=torch.from_numpy(np.stack(lpets)).float(),
            spet=torch.from_numpy(np.stack(spets)).float(),
            ct=torch.from_numpy(np.stack(cts)).float(),
            dose=torch.tensor(doses, dtype=torch.float32),
            ids=[record.id for record in records],
        )


def volume_batch(lpet: Volume, ct: Volume, dose: DoseLevel, normalizer: Normalizer) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Whole volumes as a batch of one, normalised for the network"""
    return (
        torch.from_numpy(normalizer.pet(lpet.data.astype(np.float64))).float()[None],
        torch.from_numpy(normalizer.ct(ct.data.astype(np.float64))).float()[None],
        torch.tensor([dose.fraction], dtype=torch.float32),
    )
