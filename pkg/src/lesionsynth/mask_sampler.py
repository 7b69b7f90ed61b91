"""Semi-random pathology masks with microbleed-like geometry.

"Semi-random" here means: lesion count, size, elongation and orientation are
random, but placement is restricted to an eroded foreground support and every
lesion stays below 10 mm in its largest physical extent. Lesions are kept
apart (no 26-neighbour contact) so each sampled lesion is its own component.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .volume_io import PATHOLOGICAL, PathologyMask, PatchSpec, extract_patches

MAX_DIAMETER_MM = 10.0


class PlacementError(ValueError):
    pass


@dataclass(frozen=True)
class LesionPrior:
    count_range: Tuple[int, int] = (1, 3)
    radius_range_mm: Tuple[float, float] = (1.0, 3.0)
    elongation_prob: float = 0.2
    elongation_ratio_range: Tuple[float, float] = (1.0, 2.0)
    foreground_margin_vox: int = 2

    def __post_init__(self):
        cmin, cmax = self.count_range
        rmin, rmax = self.radius_range_mm
        emin, emax = self.elongation_ratio_range
        if cmin < 0 or cmin > cmax:
            raise ValueError(f"invalid count_range {self.count_range}")
        if rmin <= 0 or rmin > rmax or 2 * rmax > MAX_DIAMETER_MM:
            raise ValueError(f"invalid radius_range_mm {self.radius_range_mm}")
        if not 0.0 <= self.elongation_prob <= 1.0:
            raise ValueError("elongation_prob must be in [0, 1]")
        if emin < 1.0 or emin > emax:
            raise ValueError(f"invalid elongation_ratio_range {self.elongation_ratio_range}")
        if self.foreground_margin_vox < 0:
            raise ValueError("foreground_margin_vox must be >= 0")


def empty_mask(shape) -> PathologyMask:
    return PathologyMask(np.zeros(tuple(shape), dtype=np.uint8))


def _random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def rasterize_ellipsoid(shape, spacing, center_vox, semi_axes_mm, rotation=None):
    """Voxels whose centres fall inside the ellipsoid; returns (mask, fully_inside_grid).

    Only a bounding cube around the centre is evaluated.
    """
    spacing = np.asarray(spacing, dtype=float)
    center = np.asarray(center_vox, dtype=float)
    axes = np.asarray(semi_axes_mm, dtype=float)
    rot = np.eye(3) if rotation is None else rotation
    reach = np.ceil(axes.max() / spacing).astype(int) + 1
    lo = np.floor(center).astype(int) - reach
    hi = np.floor(center).astype(int) + reach + 1
    grids = np.meshgrid(*[np.arange(a, b) for a, b in zip(lo, hi)], indexing="ij")
    offs = np.stack([(g - c) * s for g, c, s in zip(grids, center, spacing)], axis=-1)
    local = offs @ rot  # coordinates along the ellipsoid axes
    inside = ((local / axes) ** 2).sum(-1) <= 1.0
    idx = np.argwhere(inside) + lo
    in_grid = ((idx >= 0) & (idx < np.asarray(shape))).all(1)
    out = np.zeros(shape, dtype=bool)
    ok = idx[in_grid]
    out[ok[:, 0], ok[:, 1], ok[:, 2]] = True
    return out, bool(in_grid.all())


def _sample_semi_axes(prior: LesionPrior, rng: np.random.Generator) -> np.ndarray:
    r = rng.uniform(*prior.radius_range_mm)
    axes = np.array([r, r, r])
    if rng.random() < prior.elongation_prob:
        ratio = rng.uniform(*prior.elongation_ratio_range)
        axes[0] = min(r * ratio, MAX_DIAMETER_MM / 2)
    return axes


def sample_pathology_mask(foreground, spacing, prior: LesionPrior, rng: np.random.Generator,
                          max_attempts: int = 200) -> PathologyMask:
    """Place ``count`` non-touching ellipsoidal lesions inside the eroded foreground."""
    fg = np.asarray(foreground.data if isinstance(foreground, PathologyMask) else foreground).astype(bool)
    if prior.foreground_margin_vox > 0:
        support = ndimage.binary_erosion(fg, iterations=prior.foreground_margin_vox, border_value=0)
    else:
        support = fg.copy()
    cmin, cmax = prior.count_range
    n = int(rng.integers(cmin, cmax + 1))
    out = np.zeros(fg.shape, dtype=bool)
    if n == 0:
        return PathologyMask(out.astype(np.uint8))
    if not support.any():
        raise PlacementError("no placement region: foreground empty after margin erosion")
    coords = np.argwhere(support)
    placed = 0
    attempts = 0
    # dilated copy of already placed lesions; new lesions may not touch it
    blocked = np.zeros_like(out)
    while placed < n:
        if attempts >= max_attempts * n:
            if placed >= cmin:
                break
            raise PlacementError(f"no placement region: only {placed} of {cmin} lesions fit")
        attempts += 1
        center = coords[rng.integers(len(coords))]
        axes = _sample_semi_axes(prior, rng)
        rot = _random_rotation(rng) if axes[0] != axes[1] else None
        lesion, whole = rasterize_ellipsoid(fg.shape, spacing, center, axes, rot)
        if not whole or (lesion & ~support).any() or (lesion & blocked).any():
            continue
        out |= lesion
        blocked |= ndimage.binary_dilation(lesion, structure=np.ones((3, 3, 3), bool))
        placed += 1
    return PathologyMask(out.astype(np.uint8))


def component_extents_mm(mask, spacing) -> List[float]:
    """Largest centre-to-centre distance (mm) between voxels of each 26-connected component."""
    labels, n = ndimage.label(np.asarray(mask.data if isinstance(mask, PathologyMask) else mask),
                              structure=np.ones((3, 3, 3), bool))
    spacing = np.asarray(spacing, dtype=float)
    extents = []
    for k in range(1, n + 1):
        pts = np.argwhere(labels == k) * spacing
        if len(pts) == 1:
            extents.append(0.0)
            continue
        d = np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1))
        extents.append(float(d.max()))
    return extents


def harvest_real_masks(records: Sequence, spec: PatchSpec) -> List[PathologyMask]:
    """Patch-cut annotated masks of the pathological records (PHP-cycle conditioning).

    Patches that contain no lesion voxels are dropped.
    """
    out = []
    for rec in records:
        if rec.domain != PATHOLOGICAL:
            continue
        out.extend(m for _, m, _ in extract_patches(rec.volume, rec.mask, spec) if m.data.any())
    return out
