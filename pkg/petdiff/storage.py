"""
File formats: raw little-endian float32 volumes with JSON sidecars, dataset
manifests, checkpoint directories and metric reports.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Iterator, Literal, Optional

import numpy as np
import torch
from pydantic import BaseModel, ValidationError, field_validator

from .logging_config import get_logger
from .models import (
    Modality,
    PetDiffError,
    SampleRecord,
    Volume,
    VolumeError,
    compute_payload_digest,
)

logger = get_logger("storage")

VOLUME_SUFFIX = ".vol"
SIDECAR_SUFFIX = ".json"
TENSOR_SUFFIX = ".f32"
MANIFEST_NAME = "manifest.json"
CHECKPOINT_NAME = "checkpoint.json"
CHECKPOINT_FORMAT = "petdiff-checkpoint"


class StorageError(PetDiffError):
    """Raised when a file cannot be read, written or validated"""

    def __init__(self, message: str, path: Optional[Path] = None):
        self.message = message
        self.path = Path(path) if path is not None else None
        super().__init__(f"{message} [{self.path}]" if self.path is not None else message)


class VolumeHeader(BaseModel):
    shape: list[int]
    dtype: Literal["f32le"] = "f32le"
    voxel_size_mm: list[float]
    modality: Modality
    dose_fraction: Optional[float] = None
    seed: Optional[int] = None

    @field_validator("shape")
    @classmethod
    def _check_shape(cls, value: list[int]) -> list[int]:
        if len(value) != 4 or min(value) < 1:
            raise ValueError(f"shape must be [C, D, H, W] with positive entries, got {value}")
        return value


def sidecar_path(path: Path) -> Path:
    return path.with_name(path.name + SIDECAR_SUFFIX)


@contextmanager
def atomic_write(path: Path, mode: str = "wb") -> Iterator[Any]:
    """Write to a temporary file next to `path` and rename it into place on success"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, mode) as handle:
            yield handle
        os.replace(tmp_name, path)
    except Exception:
        Path(tmp_name).unlink(missing_ok=True)
        raise


def _write_json(path: Path, payload: Any) -> None:
    try:
        with atomic_write(path, "w") as handle:
            json.dump(payload, handle, sort_keys=True, indent=2)
            handle.write("\n")
    except OSError as e:
        raise StorageError(f"cannot write JSON: {e}", path) from e


def _read_json(path: Path) -> Any:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as e:
        raise StorageError("file not found", path) from e
    except (OSError, json.JSONDecodeError) as e:
        raise StorageError(f"cannot read JSON: {e}", path) from e


def _write_raw(path: Path, array: np.ndarray) -> str:
    payload = np.ascontiguousarray(array, dtype="<f4").tobytes(order="C")
    try:
        with atomic_write(path) as handle:
            handle.write(payload)
    except OSError as e:
        raise StorageError(f"cannot write voxels: {e}", path) from e
    return hashlib.sha256(payload).hexdigest()


def _read_raw(path: Path, shape: list[int]) -> tuple[np.ndarray, str]:
    try:
        payload = Path(path).read_bytes()
    except FileNotFoundError as e:
        raise StorageError("file not found", path) from e
    except OSError as e:
        raise StorageError(f"cannot read voxels: {e}", path) from e
    expected = int(np.prod(shape)) * 4
    if len(payload) != expected:
        raise StorageError(f"expected {expected} bytes for shape {shape}, found {len(payload)}", path)
    array = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
    return array, hashlib.sha256(payload).hexdigest()


def write_volume(
    path: Path,
    volume: Volume,
    modality: Modality,
    *,
    dose_fraction: Optional[float] = None,
    seed: Optional[int] = None,
) -> Path:
    """Write `<name>.vol` and its `<name>.vol.json` sidecar"""
    path = Path(path)
    header = VolumeHeader(
        shape=list(volume.shape),
        voxel_size_mm=list(volume.voxel_size_mm),
        modality=modality,
        dose_fraction=dose_fraction,
        seed=seed,
    )
    _write_raw(path, volume.data)
    _write_json(sidecar_path(path), header.model_dump(mode="json"))
    return path


def read_volume(path: Path) -> tuple[Volume, VolumeHeader]:
    path = Path(path)
    try:
        header = VolumeHeader.model_validate(_read_json(sidecar_path(path)))
    except ValidationError as e:
        raise StorageError(f"invalid volume sidecar: {e}", sidecar_path(path)) from e
    data, _ = _read_raw(path, header.shape)
    try:
        volume = Volume(data, tuple(header.voxel_size_mm))  # type: ignore[arg-type]
    except VolumeError as e:
        raise StorageError(f"invalid volume: {e}", path) from e
    return volume, header


def write_manifest(root: Path, records: list[SampleRecord]) -> Path:
    path = Path(root) / MANIFEST_NAME
    _write_json(path, [record.model_dump(mode="json") for record in records])
    return path


def read_manifest(root: Path) -> list[SampleRecord]:
    path = Path(root) / MANIFEST_NAME
    payload = _read_json(path)
    if not isinstance(payload, list):
        raise StorageError("manifest must be a JSON array of sample records", path)
    try:
        return [SampleRecord.model_validate(item) for item in payload]
    except ValidationError as e:
        raise StorageError(f"invalid sample record: {e}", path) from e


def load_record_volumes(root: Path, record: SampleRecord) -> tuple[Volume, Volume, Volume]:
    """(lpet, spet, ct) of one record, checked for matching spatial shape"""
    lpet_path, spet_path, ct_path = record.paths(Path(root))
    lpet, _ = read_volume(lpet_path)
    spet, _ = read_volume(spet_path)
    ct, _ = read_volume(ct_path)
    if not (lpet.spatial_shape == spet.spatial_shape == ct.spatial_shape):
        raise StorageError(
            f"record {record.id} mixes spatial shapes {lpet.spatial_shape}, {spet.spatial_shape}, {ct.spatial_shape}",
            lpet_path,
        )
    return lpet, spet, ct


def save_checkpoint(directory: Path, state: dict[str, torch.Tensor], metadata: dict[str, Any]) -> Path:
    """
    Write every tensor as raw float32 plus sidecar under `tensors/`, and a
    `checkpoint.json` listing names, shapes and SHA-256 digests.
    """
    directory = Path(directory)
    tensors = []
    for name, tensor in state.items():
        array = tensor.detach().cpu().to(torch.float32).numpy()
        file_name = f"tensors/{name}{TENSOR_SUFFIX}"
        digest = _write_raw(directory / file_name, array)
        _write_json(sidecar_path(directory / file_name), {"dtype": "f32le", "shape": list(array.shape)})
        tensors.append({"name": name, "file": file_name, "shape": list(array.shape), "sha256": digest})

    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "metadata": metadata,
        "metadata_digest": compute_payload_digest(metadata),
        "tensors": tensors,
    }
    _write_json(directory / CHECKPOINT_NAME, payload)
    logger.info(f"Saved checkpoint with {len(tensors)} tensors to {directory}")
    return directory


def load_checkpoint(directory: Path) -> tuple[dict[str, torch.Tensor], dict[str, Any]]:
    directory = Path(directory)
    payload = _read_json(directory / CHECKPOINT_NAME)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise StorageError("not a petdiff checkpoint", directory / CHECKPOINT_NAME)
    metadata = payload["metadata"]
    if compute_payload_digest(metadata) != payload.get("metadata_digest"):
        raise StorageError("checkpoint metadata digest mismatch", directory / CHECKPOINT_NAME)

    state: dict[str, torch.Tensor] = {}
    for entry in payload["tensors"]:
        path = directory / entry["file"]
        array, digest = _read_raw(path, entry["shape"])
        if digest != entry["sha256"]:
            raise StorageError(f"digest mismatch for tensor {entry['name']}", path)
        state[entry["name"]] = torch.from_numpy(array.copy())
    return state, metadata


def write_report(path: Path, payload: dict[str, Any]) -> Path:
    _write_json(Path(path), payload)
    return Path(path)


def write_text(path: Path, text: str) -> Path:
    try:
        with atomic_write(Path(path), "w") as handle:
            handle.write(text)
    except OSError as e:
        raise StorageError(f"cannot write file: {e}", path) from e
    return Path(path)

