"""Procedural brain-like phantoms: textured ellipsoidal support, dark tubular
vessels and dark ellipsoidal lesions with an exact ground-truth mask.

This is an engineered test oracle, not an MR simulator.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from scipy import ndimage

from .mask_sampler import LesionPrior, PlacementError, sample_pathology_mask
from .volume_io import (HEALTHY, PATHOLOGICAL, SampleRecord, Volume,
                        load_mask, load_volume, save_mask, save_volume)

SHELL_WIDTH = 2


@dataclass(frozen=True)
class PhantomConfig:
    shape: Tuple[int, int, int] = (64, 64, 32)
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    background_level: float = 0.0
    tissue_level: float = 0.65
    tissue_texture_scale: float = 2.0
    tissue_texture_std: float = 0.04
    vessel_count: int = 3
    vessel_radius_range: Tuple[float, float] = (0.8, 1.3)
    vessel_contrast: float = 0.55
    lesion_prior: LesionPrior = field(default_factory=lambda: LesionPrior(count_range=(1, 3),
                                                                          foreground_margin_vox=3))
    lesion_contrast: float = 0.45
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.lesion_contrast <= 1.0:
            raise ValueError("lesion_contrast must lie in (0, 1]")
        if any(int(s) < 8 for s in self.shape):
            raise ValueError("phantom shape must be at least 8 voxels per axis")


def brain_support(shape) -> np.ndarray:
    """Ellipsoid filling ~90% of the in-plane extent and ~80% of z."""
    grids = np.meshgrid(*[np.arange(s) for s in shape], indexing="ij")
    semi = [0.45 * shape[0], 0.45 * shape[1], 0.40 * shape[2]]
    center = [(s - 1) / 2 for s in shape]
    r2 = sum(((g - c) / a) ** 2 for g, c, a in zip(grids, center, semi))
    return r2 <= 1.0


def _vessels(shape, support, cfg: PhantomConfig, rng: np.random.Generator) -> np.ndarray:
    """Roughly straight tubes along x or y with a gentle sinusoidal wander."""
    out = np.zeros(shape, dtype=bool)
    grids = np.stack(np.meshgrid(*[np.arange(s) for s in shape], indexing="ij"), axis=-1).astype(float)
    for _ in range(cfg.vessel_count):
        for _attempt in range(20):
            axis = int(rng.integers(2))
            other = 1 - axis
            length = shape[axis]
            t = np.arange(length, dtype=float)
            amp = rng.uniform(0.5, 2.0)
            phase = rng.uniform(0, 2 * np.pi)
            freq = rng.uniform(0.5, 1.5) * 2 * np.pi / length
            c_other = rng.uniform(0.3, 0.7) * shape[other] + amp * np.sin(freq * t + phase)
            c_z = rng.uniform(0.35, 0.65) * shape[2] + 0.5 * amp * np.cos(freq * t + phase)
            radius = rng.uniform(*cfg.vessel_radius_range)
            # distance in the plane orthogonal to the vessel axis, per slice along the axis
            coord_other = np.moveaxis(grids[..., other], axis, 0)
            coord_z = np.moveaxis(grids[..., 2], axis, 0)
            d2 = (coord_other - c_other[:, None, None]) ** 2 + (coord_z - c_z[:, None, None]) ** 2
            tube = np.moveaxis(d2 <= radius ** 2, 0, axis) & support
            grown = ndimage.binary_dilation(tube, iterations=2)
            if (grown & out).any():
                continue
            out |= tube
            break
    # drop fragments that are not clearly elongated (ellipsoid clipping can leave stubs)
    labels, n = ndimage.label(out, structure=np.ones((3, 3, 3), bool))
    for k, sl in enumerate(ndimage.find_objects(labels), start=1):
        ext = sorted(s.stop - s.start for s in sl)
        if ext[-1] < 3 * ext[0]:
            out[labels == k] = False
    return out


def _shell(component: np.ndarray, width: int = SHELL_WIDTH) -> np.ndarray:
    return ndimage.binary_dilation(component, structure=np.ones((3, 3, 3), bool), iterations=width) & ~component


def generate_phantom(config: PhantomConfig, subject_id: Optional[str] = None) -> SampleRecord:
    """One phantom; lesion count 0 yields a healthy record with an empty mask."""
    rng = np.random.default_rng(config.seed)
    shape = tuple(int(s) for s in config.shape)
    support = brain_support(shape)

    noise = rng.standard_normal(shape)
    texture = ndimage.gaussian_filter(noise, config.tissue_texture_scale)
    texture *= config.tissue_texture_std / max(texture.std(), 1e-12)
    tissue = np.clip(config.tissue_level + texture, 0.0, 1.0)

    vessels = _vessels(shape, support, config, rng)
    img = np.where(support, tissue, config.background_level)
    img[vessels] *= 1.0 - config.vessel_contrast

    # lesions avoid vessels (and their 2-voxel shells) so the shell contrast stays clean
    placement = support & ~ndimage.binary_dilation(vessels, iterations=SHELL_WIDTH + 2)
    try:
        mask = sample_pathology_mask(placement, config.spacing, config.lesion_prior, rng)
    except PlacementError as exc:
        raise PlacementError(f"lesions unplaceable: {exc}") from exc

    labels, n = ndimage.label(mask.data, structure=np.ones((3, 3, 3), bool))
    c = config.lesion_contrast
    for k in range(1, n + 1):
        comp = labels == k
        shell_mean = img[_shell(comp)].mean()
        target = shell_mean - c
        # the 0.75 factor leaves headroom over the c/2 hypointensity requirement
        if target < 0 and shell_mean - 0.75 * c < 0:
            raise PlacementError("lesions unplaceable: surrounding tissue too dark for lesion_contrast")
        img[comp] = np.clip(tissue[comp] - c, 0.0, None) if target >= 0 else 0.0
        inside = img[comp].mean()
        if inside + c / 2 >= shell_mean:
            img[comp] = max(shell_mean - 0.75 * c, 0.0)

    domain = PATHOLOGICAL if n > 0 else HEALTHY
    sid = subject_id if subject_id is not None else f"{domain[0]}{config.seed:06d}"
    vol = Volume(np.clip(img, 0.0, 1.0).astype(np.float32), config.spacing)
    return SampleRecord(vol, mask, domain, sid)


def generate_dataset(n_healthy: int, n_pathological: int, config: PhantomConfig, seed: int) -> List[SampleRecord]:
    """Deterministic fan-out; each record gets its own child seed."""
    seeds = np.random.SeedSequence(seed).generate_state(n_healthy + n_pathological, dtype=np.uint64)
    healthy_prior = replace(config.lesion_prior, count_range=(0, 0))
    path_prior = config.lesion_prior
    if path_prior.count_range[0] < 1:
        path_prior = replace(path_prior, count_range=(1, max(1, path_prior.count_range[1])))
    records = []
    for i in range(n_healthy):
        cfg = replace(config, lesion_prior=healthy_prior, seed=int(seeds[i]))
        records.append(generate_phantom(cfg, subject_id=f"healthy_{i:03d}"))
    for j in range(n_pathological):
        cfg = replace(config, lesion_prior=path_prior, seed=int(seeds[n_healthy + j]))
        records.append(generate_phantom(cfg, subject_id=f"patho_{j:03d}"))
    return records


# --------------------------------------------------------------- dataset dirs

MANIFEST = "manifest.csv"


def write_dataset(records: List[SampleRecord], out_dir) -> Path:
    """NIfTI volume/mask pairs plus ``manifest.csv`` (subject_id, domain, volume, mask)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for rec in records:
        vname = f"{rec.subject_id}_img.nii.gz"
        mname = f"{rec.subject_id}_mask.nii.gz"
        save_volume(rec.volume, out_dir / vname)
        save_mask(rec.mask, out_dir / mname, rec.volume.spacing)
        rows.append({"subject_id": rec.subject_id, "domain": rec.domain, "volume": vname, "mask": mname})
    with open(out_dir / MANIFEST, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["subject_id", "domain", "volume", "mask"])
        writer.writeheader()
        writer.writerows(rows)
    return out_dir / MANIFEST


def read_dataset(directory) -> List[SampleRecord]:
    directory = Path(directory)
    manifest = directory / MANIFEST
    if not manifest.exists():
        raise FileNotFoundError(f"no {MANIFEST} in {directory}")
    records = []
    with open(manifest, newline="") as fh:
        for row in csv.DictReader(fh):
            vol = load_volume(directory / row["volume"])
            vol = Volume(vol.data.astype(np.float32), vol.spacing)
            mask = load_mask(directory / row["mask"])
            records.append(SampleRecord(vol, mask, row["domain"], row["subject_id"]))
    return records
