"""Volume / mask containers, disk I/O, intensity normalisation and z-patching.

Arrays are indexed (x, y, z); z is the slice axis along which patches overlap.
Two on-disk formats are supported: NIfTI-1 (``.nii`` / ``.nii.gz``) and a raw
test format (``.raw`` little-endian float32, x-fastest, with a ``.json``
sidecar carrying ``shape`` and ``spacing``).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np


class VolumeFormatError(ValueError):
    """Base class for unreadable volume files."""


class NonVolumeError(VolumeFormatError):
    """Payload is not a scalar 3D array."""


class CorruptHeaderError(VolumeFormatError):
    """Header could not be parsed."""


@dataclass
class Volume:
    data: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise NonVolumeError(f"non-3D payload: got shape {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be three positive values, got {self.spacing}")

    @property
    def shape(self):
        return self.data.shape


@dataclass
class PathologyMask:
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise NonVolumeError(f"non-3D payload: got shape {data.shape}")
        if not np.isin(data, (0, 1)).all():
            raise ValueError("pathology mask values must be 0 or 1")
        self.data = data.astype(np.uint8)

    @property
    def shape(self):
        return self.data.shape

    def check_pairs(self, volume: Volume) -> None:
        if self.shape != volume.shape:
            raise ValueError(f"mask shape {self.shape} != volume shape {volume.shape}")


HEALTHY = "healthy"
PATHOLOGICAL = "pathological"


@dataclass
class SampleRecord:
    volume: Volume
    mask: PathologyMask
    domain: str
    subject_id: str

    def __post_init__(self):
        if self.domain not in (HEALTHY, PATHOLOGICAL):
            raise ValueError(f"unknown domain tag {self.domain!r}")
        self.mask.check_pairs(self.volume)
        if self.domain == HEALTHY and self.mask.data.any():
            raise ValueError("healthy records must carry an empty mask")


@dataclass(frozen=True)
class PatchSpec:
    patch_shape: Tuple[int, int, int] = (160, 146, 32)
    z_overlap_fraction: float = 0.5

    def __post_init__(self):
        if len(self.patch_shape) != 3 or any(int(p) < 1 for p in self.patch_shape):
            raise ValueError(f"patch_shape components must be >= 1, got {self.patch_shape}")
        if not 0.0 <= self.z_overlap_fraction < 1.0:
            raise ValueError("z_overlap_fraction must lie in [0, 1)")
        if self.stride_z < 1:
            raise ValueError("z stride must be >= 1")

    @property
    def stride_z(self) -> int:
        # floor(x + 0.5): half-up rounding, not banker's rounding
        return int(math.floor(self.patch_shape[2] * (1.0 - self.z_overlap_fraction) + 0.5))


# --------------------------------------------------------------------------- I/O


def _is_nifti(path: Path) -> bool:
    name = path.name.lower()
    return name.endswith(".nii") or name.endswith(".nii.gz")


def _sidecar(path: Path) -> Path:
    return path.with_suffix(".json")


def load_volume(path) -> Volume:
    """Read a scalar 3D NIfTI-1 or raw volume. No normalisation is applied."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"volume file not found: {path}")
    if _is_nifti(path):
        return _load_nifti(path)
    if path.suffix.lower() == ".raw":
        return _load_raw(path)
    raise VolumeFormatError(f"unsupported volume extension: {path.name}")


def _load_nifti(path: Path) -> Volume:
    import nibabel as nib
    from nibabel.filebasedimages import ImageFileError
    from nibabel.spatialimages import HeaderDataError

    try:
        img = nib.load(str(path))
        shape = img.shape
        zooms = img.header.get_zooms()
    except (ImageFileError, HeaderDataError, EOFError, OSError, ValueError) as exc:
        raise CorruptHeaderError(f"corrupt header in {path}: {exc}") from exc
    if len(shape) != 3:
        raise NonVolumeError(f"non-3D payload: {path} has shape {shape}")
    if img.get_data_dtype().fields is not None or np.dtype(img.get_data_dtype()).kind == "c":
        raise NonVolumeError(f"non-scalar payload in {path}")
    try:
        data = np.asanyarray(img.dataobj)
    except (EOFError, OSError, ValueError) as exc:
        raise CorruptHeaderError(f"could not read voxel data from {path}: {exc}") from exc
    return Volume(np.array(data), tuple(float(z) for z in zooms[:3]))


def _load_raw(path: Path) -> Volume:
    side = _sidecar(path)
    if not side.exists():
        raise FileNotFoundError(f"missing sidecar metadata: {side}")
    try:
        meta = json.loads(side.read_text())
        shape = tuple(int(s) for s in meta["shape"])
        spacing = tuple(float(s) for s in meta["spacing"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise CorruptHeaderError(f"corrupt sidecar {side}: {exc}") from exc
    if len(shape) != 3:
        raise NonVolumeError(f"non-3D payload: sidecar declares shape {shape}")
    flat = np.fromfile(path, dtype="<f4")
    if flat.size != int(np.prod(shape)):
        raise CorruptHeaderError(f"{path}: {flat.size} values but header declares {shape}")
    return Volume(flat.reshape(shape, order="F"), spacing)


def save_volume(v: Volume, path, *, as_mask: bool = False) -> None:
    """Write a volume (float32) or a mask (uint8 when ``as_mask``)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if _is_nifti(path):
        import nibabel as nib

        data = v.data.astype(np.uint8 if as_mask else v.data.dtype)
        if data.dtype == np.float64:
            data = data.astype(np.float32)
        affine = np.diag([*v.spacing, 1.0])
        img = nib.Nifti1Image(data, affine)
        img.header.set_zooms(v.spacing)
        img.header.set_data_dtype(data.dtype)
        nib.save(img, str(path))
    elif path.suffix.lower() == ".raw":
        np.asarray(v.data, dtype="<f4").ravel(order="F").tofile(path)
        _sidecar(path).write_text(json.dumps({"shape": list(v.shape), "spacing": list(v.spacing)}))
    else:
        raise VolumeFormatError(f"unsupported volume extension: {path.name}")


def load_mask(path) -> PathologyMask:
    return PathologyMask(np.rint(load_volume(path).data).astype(np.uint8))


def save_mask(m: PathologyMask, path, spacing=(1.0, 1.0, 1.0)) -> None:
    save_volume(Volume(m.data, spacing), path, as_mask=True)


# --------------------------------------------------------------- preprocessing


def clip_and_rescale(v: Volume, low_pct: float = 0.0, high_pct: float = 99.5) -> Volume:
    """Clip to the [low_pct, high_pct] percentiles and map that range onto [0, 1].

    Percentiles use linear interpolation between closest ranks. A volume whose
    two percentiles coincide maps to all zeros. Normalisation is per volume.
    """
    if not 0.0 <= low_pct < high_pct <= 100.0:
        raise ValueError(f"need 0 <= low_pct < high_pct <= 100, got {low_pct}, {high_pct}")
    data = np.asarray(v.data, dtype=np.float64)
    if not np.isfinite(data).all():
        raise ValueError("volume contains non-finite values")
    lo, hi = np.percentile(data, [low_pct, high_pct], method="linear")
    if hi == lo:
        out = np.zeros_like(data)
    else:
        out = (np.clip(data, lo, hi) - lo) / (hi - lo)
    return Volume(out.astype(np.float32), v.spacing)


def patch_origins(z_extent: int, spec: PatchSpec) -> List[int]:
    pz = spec.patch_shape[2]
    if z_extent < pz:
        raise ValueError(f"z extent {z_extent} smaller than patch depth {pz}")
    origins = list(range(0, z_extent - pz + 1, spec.stride_z))
    if origins[-1] + pz < z_extent:
        origins.append(z_extent - pz)
    return origins


def extract_patches(v: Volume, m: PathologyMask, spec: PatchSpec):
    """Cut full-axial-plane slabs along z; returns ``[(Volume, PathologyMask, origin)]``.

    ``origin`` is the (x, y, z) voxel index of the patch corner.
    """
    m.check_pairs(v)
    px, py, pz = spec.patch_shape
    X, Y, Z = v.shape
    if (X, Y) != (px, py):
        raise ValueError(f"patches must span the axial plane: volume {(X, Y)} vs patch {(px, py)}")
    out = []
    for z0 in patch_origins(Z, spec):
        out.append(
            (
                Volume(v.data[:, :, z0 : z0 + pz].copy(), v.spacing),
                PathologyMask(m.data[:, :, z0 : z0 + pz].copy()),
                (0, 0, z0),
            )
        )
    return out


def stitch_patches(patches: Sequence, origins: Sequence, full_shape, spacing=None) -> Volume:
    """Reassemble patches; overlapping voxels are averaged uniformly."""
    acc = np.zeros(full_shape, dtype=np.float64)
    count = np.zeros(full_shape, dtype=np.float64)
    for patch, origin in zip(patches, origins):
        data = patch.data if isinstance(patch, Volume) else np.asarray(patch)
        sl = tuple(slice(o, o + s) for o, s in zip(origin, data.shape))
        acc[sl] += data
        count[sl] += 1.0
    if (count == 0).any():
        raise ValueError("patches do not cover the full volume")
    if spacing is None:
        spacing = patches[0].spacing if patches and isinstance(patches[0], Volume) else (1.0, 1.0, 1.0)
    return Volume((acc / count).astype(np.float32), spacing)
