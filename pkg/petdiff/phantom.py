"""
Synthetic co-registered PET/CT phantoms and multi-dose LPET simulation.

A phantom is a body ellipsoid holding ellipsoidal organs, a rib-like bone
shell concentric with the body and a solid spine posterior to the organs.
Hot lesions sit inside organs. CT is piecewise constant with sharp edges;
PET activity follows the same anatomy with soft edges. Low-dose PET is drawn
by Poisson thinning of the standard-dose activity.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .config import settings
from .logging_config import get_logger
from .models import (
    DoseLevel,
    DoseProtocol,
    Modality,
    PetDiffError,
    PhantomSpec,
    SampleRecord,
    Split,
    Volume,
)
from .storage import write_manifest, write_volume

logger = get_logger("phantom")

# Layout in units of the body radii
BODY_SCALE = 0.42
RIB_SCALE = 0.85
ORGAN_OFFSET = 0.3
ORGAN_RADIUS = (0.12, 0.2)
SPINE_OFFSET = 0.7
SPINE_RADIUS = 0.1
LESION_RADIUS = (0.2, 0.4)
# Width in voxels of the PET activity edge
EDGE_VOXELS = 1.0


class PhantomError(PetDiffError, ValueError):
    """Raised for invalid phantom layouts or activities"""
    pass


@dataclass(frozen=True)
class Ellipsoid:
    center: tuple[float, float, float]
    radii: tuple[float, float, float]

    def radius_map(self, grid: np.ndarray) -> np.ndarray:
        """Normalised radius at every voxel; 1 on the surface"""
        offsets = [(grid[axis] - self.center[axis]) / self.radii[axis] for axis in range(3)]
        return np.sqrt(sum(o ** 2 for o in offsets))

    def mask(self, grid: np.ndarray) -> np.ndarray:
        return self.radius_map(grid) <= 1.0

    def shell(self, grid: np.ndarray, thickness: float) -> np.ndarray:
        inner = Ellipsoid(self.center, tuple(max(r - thickness, 0.0) for r in self.radii))  # type: ignore[arg-type]
        return self.mask(grid) & ~inner.mask(grid)

    def scaled(self, factor: float) -> "Ellipsoid":
        return Ellipsoid(self.center, tuple(r * factor for r in self.radii))  # type: ignore[arg-type]


@dataclass(frozen=True)
class Structure:
    """One ellipsoid with its CT value (HU) and PET activity"""

    ellipsoid: Ellipsoid
    ct_value: float
    activity: float


@dataclass(frozen=True)
class PhantomLayout:
    spec: PhantomSpec
    air_value: float
    body: Structure
    organs: list[Structure] = field(default_factory=list)
    lesions: list[Structure] = field(default_factory=list)
    ribs: Optional[Ellipsoid] = None
    spine: Optional[Ellipsoid] = None
    bone_value: float = 1000.0

    def grid(self) -> np.ndarray:
        """(3, D, H, W) voxel-centre coordinates"""
        return np.indices(self.spec.shape, dtype=np.float64)

    def bone_mask(self, grid: Optional[np.ndarray] = None) -> np.ndarray:
        grid = self.grid() if grid is None else grid
        mask = np.zeros(self.spec.shape, dtype=bool)
        if self.ribs is not None:
            mask |= self.ribs.shell(grid, self.spec.bone_thickness)
        if self.spine is not None:
            mask |= self.spine.mask(grid)
        return mask

    def organ_mask(self, grid: Optional[np.ndarray] = None) -> np.ndarray:
        grid = self.grid() if grid is None else grid
        mask = np.zeros(self.spec.shape, dtype=bool)
        for organ in self.organs:
            mask |= organ.ellipsoid.mask(grid)
        return mask

    def lesion_mask(self, grid: Optional[np.ndarray] = None) -> np.ndarray:
        grid = self.grid() if grid is None else grid
        mask = np.zeros(self.spec.shape, dtype=bool)
        for lesion in self.lesions:
            mask |= lesion.ellipsoid.mask(grid)
        return mask


def _uniform(rng: np.random.Generator, bounds: tuple[float, float]) -> float:
    lo, hi = bounds
    return float(rng.uniform(lo, hi)) if hi > lo else float(lo)


def build_layout(spec: PhantomSpec) -> PhantomLayout:
    rng = np.random.default_rng(spec.seed)
    shape = np.asarray(spec.shape, dtype=np.float64)
    center = tuple((shape - 1) / 2)
    body_radii = tuple(BODY_SCALE * shape * rng.uniform(0.9, 1.0, size=3))
    body = Structure(Ellipsoid(center, body_radii), _uniform(rng, spec.ct_soft_tissue), _uniform(rng, spec.pet_background))

    organs = []
    for _ in range(int(rng.integers(spec.organ_count[0], spec.organ_count[1] + 1))):
        offset = rng.uniform(-ORGAN_OFFSET, ORGAN_OFFSET, size=3)
        radii = rng.uniform(*ORGAN_RADIUS, size=3)
        organs.append(
            Structure(
                Ellipsoid(
                    tuple(c + o * r for c, o, r in zip(center, offset, body_radii)),
                    tuple(f * r for f, r in zip(radii, body_radii)),
                ),
                _uniform(rng, spec.ct_soft_tissue),
                _uniform(rng, spec.pet_organ),
            )
        )

    lesions = []
    for _ in range(int(rng.integers(spec.lesion_count[0], spec.lesion_count[1] + 1))):
        host_organ = organs[int(rng.integers(len(organs)))]
        host = host_organ.ellipsoid
        scale = rng.uniform(*LESION_RADIUS)
        # Keep the lesion inside its host organ
        shift = rng.uniform(-1, 1, size=3) * (1 - scale) * 0.5
        lesions.append(
            Structure(
                Ellipsoid(
                    tuple(c + s * r for c, s, r in zip(host.center, shift, host.radii)),
                    tuple(max(scale * r, 1.0) for r in host.radii),
                ),
                host_organ.ct_value,
                _uniform(rng, spec.pet_lesion),
            )
        )

    spine_center = (center[0], center[1] + SPINE_OFFSET * body_radii[1], center[2])
    spine = Ellipsoid(spine_center, (body_radii[0] * 0.8, *(SPINE_RADIUS * r for r in body_radii[1:])))  # type: ignore[arg-type]

    return PhantomLayout(
        spec=spec,
        air_value=_uniform(rng, spec.ct_air),
        body=body,
        organs=organs,
        lesions=lesions,
        ribs=body.ellipsoid.scaled(RIB_SCALE),
        spine=spine,
        bone_value=_uniform(rng, spec.ct_bone),
    )


def render_ct(layout: PhantomLayout) -> np.ndarray:
    """Piecewise-constant HU map: air, soft tissue per structure, bone painted last"""
    grid = layout.grid()
    ct = np.full(layout.spec.shape, layout.air_value, dtype=np.float64)
    ct[layout.body.ellipsoid.mask(grid)] = layout.body.ct_value
    for organ in layout.organs:
        ct[organ.ellipsoid.mask(grid)] = organ.ct_value
    ct[layout.bone_mask(grid)] = layout.bone_value
    return ct


def _soft(ellipsoid: Ellipsoid, grid: np.ndarray) -> np.ndarray:
    # Logistic edge about one voxel wide around the surface
    sharpness = min(ellipsoid.radii) / EDGE_VOXELS
    x = np.clip((1.0 - ellipsoid.radius_map(grid)) * sharpness, -50.0, 50.0)
    return 1.0 / (1.0 + np.exp(-x))


def render_pet(layout: PhantomLayout) -> np.ndarray:
    """Smooth activity map; lesion voxels hold exactly their lesion activity"""
    grid = layout.grid()
    pet = layout.body.activity * _soft(layout.body.ellipsoid, grid)
    for structure in layout.organs + layout.lesions:
        weight = _soft(structure.ellipsoid, grid)
        pet = pet * (1 - weight) + structure.activity * weight
    for lesion in layout.lesions:
        pet[lesion.ellipsoid.mask(grid)] = lesion.activity
    return pet


def generate_phantom(spec: PhantomSpec) -> tuple[Volume, Volume]:
    """(CT in HU, standard-dose PET activity), co-registered and deterministic in spec.seed"""
    layout = build_layout(spec)
    ct = Volume(render_ct(layout), spec.voxel_size_mm)
    spet = Volume(render_pet(layout), spec.voxel_size_mm)
    return ct, spet


def simulate_dose(
    spet: Volume,
    dose: DoseLevel | float,
    kappa: float = 50.0,
    seed: int | np.random.SeedSequence | np.random.Generator | None = None,
) -> Volume:
    """
    counts ~ Poisson(kappa * f * spet), lpet = counts / (kappa * f).
    Unbiased, with per-voxel std sqrt(spet / (kappa * f)).
    """
    fraction = dose.fraction if isinstance(dose, DoseLevel) else DoseLevel(fraction=dose).fraction
    if kappa <= 0:
        raise PhantomError(f"kappa must be positive, got {kappa}")
    activity = spet.data.astype(np.float64)
    if np.any(activity < 0):
        raise PhantomError("standard-dose activity contains negative voxels")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    rate = kappa * fraction
    counts = rng.poisson(rate * activity)
    return spet.with_data(counts / rate)


def phantom_seed(master_seed: int, phantom_id: int) -> int:
    return int(np.random.SeedSequence([master_seed, phantom_id, 0]).generate_state(1, np.uint64)[0])


def dose_seed(master_seed: int, phantom_id: int, dose_index: int) -> int:
    return int(np.random.SeedSequence([master_seed, phantom_id, dose_index + 1]).generate_state(1, np.uint64)[0])


def split_for(phantom_id: int, n_samples: int, split_ratios: tuple[float, float, float]) -> Split:
    """Contiguous id blocks: train first, then val, then test"""
    n_train = int(round(n_samples * split_ratios[0]))
    n_val = int(round(n_samples * split_ratios[1]))
    if phantom_id < n_train:
        return Split.TRAIN
    if phantom_id < n_train + n_val:
        return Split.VAL
    return Split.TEST


def _permille(fraction: float) -> int:
    return int(round(fraction * 1000))


def _build_one(
    phantom_id: int,
    template: PhantomSpec,
    protocol: DoseProtocol,
    split: Split,
    out_dir: Path,
    master_seed: int,
) -> list[SampleRecord]:
    spec = template.model_copy(update={"seed": phantom_seed(master_seed, phantom_id)})
    ct, spet = generate_phantom(spec)
    stem = f"phantom_{phantom_id:04d}"
    spet_name, ct_name = f"{stem}_spet.vol", f"{stem}_ct.vol"
    write_volume(out_dir / spet_name, spet, Modality.PET, dose_fraction=1.0, seed=spec.seed)
    write_volume(out_dir / ct_name, ct, Modality.CT, seed=spec.seed)

    records = []
    for index, dose in enumerate(protocol.levels()):
        seed = dose_seed(master_seed, phantom_id, index)
        lpet = simulate_dose(spet, dose, protocol.kappa, seed)
        lpet_name = f"{stem}_lpet_p{_permille(dose.fraction):04d}.vol"
        write_volume(out_dir / lpet_name, lpet, Modality.PET, dose_fraction=dose.fraction, seed=seed)
        records.append(
            SampleRecord(
                id=f"{stem}_p{_permille(dose.fraction):04d}",
                phantom_id=phantom_id,
                lpet_path=lpet_name,
                spet_path=spet_name,
                ct_path=ct_name,
                dose=dose,
                seed=seed,
                split=split,
            )
        )
    logger.info(f"Phantom {phantom_id:04d} ({split.value}): {len(records)} dose levels written")
    return records


def build_dataset(
    template: PhantomSpec,
    protocol: DoseProtocol,
    n_samples: int,
    split_ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
    out_dir: Optional[str | Path] = None,
    master_seed: int = 0,
    workers: int = 1,
) -> list[SampleRecord]:
    """
    Write one SPET, one CT and one LPET per dose for each of `n_samples`
    phantoms, plus manifest.json with one record per LPET. Randomness of
    each file derives from (master_seed, phantom_id, dose index) only.
    """
    if n_samples < 1:
        raise PhantomError(f"n_samples must be positive, got {n_samples}")
    if len(split_ratios) != 3 or min(split_ratios) < 0 or abs(sum(split_ratios) - 1.0) > 1e-6:
        raise PhantomError(f"split_ratios must be three non-negative numbers summing to 1, got {split_ratios}")
    out_dir = Path(out_dir) if out_dir is not None else Path(settings.data_root) / "phantoms"
    out_dir.mkdir(parents=True, exist_ok=True)

    def job(phantom_id: int) -> list[SampleRecord]:
        split = split_for(phantom_id, n_samples, split_ratios)
        return _build_one(phantom_id, template, protocol, split, out_dir, master_seed)

    with ThreadPoolExecutor(max_workers=max(workers, 1)) as pool:
        per_phantom = list(pool.map(job, range(n_samples)))

    records = [record for batch in per_phantom for record in batch]
    write_manifest(out_dir, records)
    logger.info(f"Dataset at {out_dir}: {n_samples} phantoms, {len(records)} records")
    return records
