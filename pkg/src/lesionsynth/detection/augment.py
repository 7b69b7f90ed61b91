"""Classical data augmentation for candidate patches.

Axial flip, in-plane rotation, isotropic scaling, in-plane shear and an
intensity affine ``a * x + b``. Geometric transforms are applied about the
patch centre to the image (linear) and the mask (nearest neighbour) alike.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy import ndimage


@dataclass(frozen=True)
class CDAParams:
    flip_prob: float = 0.5
    max_rotation_deg: float = 15.0
    scale_range: Tuple[float, float] = (0.9, 1.1)
    max_shear: float = 0.1
    intensity_scale_range: Tuple[float, float] = (0.9, 1.1)
    intensity_shift_range: Tuple[float, float] = (-0.05, 0.05)


@dataclass(frozen=True)
class CDASample:
    """One concrete draw of augmentation parameters."""
    flip: bool = False
    rotation_deg: float = 0.0
    scale: float = 1.0
    shear: float = 0.0
    intensity_scale: float = 1.0
    intensity_shift: float = 0.0

    def is_affine_identity(self):
        return self.rotation_deg == 0.0 and self.scale == 1.0 and self.shear == 0.0


def draw(params: CDAParams, rng: np.random.Generator) -> CDASample:
    return CDASample(
        flip=bool(rng.random() < params.flip_prob),
        rotation_deg=float(rng.uniform(-params.max_rotation_deg, params.max_rotation_deg)),
        scale=float(rng.uniform(*params.scale_range)),
        shear=float(rng.uniform(-params.max_shear, params.max_shear)),
        intensity_scale=float(rng.uniform(*params.intensity_scale_range)),
        intensity_shift=float(rng.uniform(*params.intensity_shift_range)),
    )


def _output_to_input_matrix(s: CDASample) -> np.ndarray:
    """Rotation/shear/scale, as the output-to-input map that affine_transform expects."""
    t = np.radians(s.rotation_deg)
    rot = np.array([[np.cos(t), -np.sin(t), 0.0], [np.sin(t), np.cos(t), 0.0], [0.0, 0.0, 1.0]])
    shear = np.array([[1.0, s.shear, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    scale = np.eye(3) * s.scale
    return np.linalg.inv(rot @ shear @ scale)


def transform(patch: np.ndarray, mask: Optional[np.ndarray], s: CDASample):
    """Apply one concrete augmentation; output image clipped to [0, 1]."""
    img = np.asarray(patch, dtype=np.float64)
    msk = None if mask is None else np.asarray(mask)
    if not s.is_affine_identity():
        mat = _output_to_input_matrix(s)
        centre = (np.asarray(img.shape) - 1) / 2.0
        offset = centre - mat @ centre
        img = ndimage.affine_transform(img, mat, offset=offset, order=1, mode="nearest")
        if msk is not None:
            msk = ndimage.affine_transform(msk.astype(np.float64), mat, offset=offset, order=0,
                                           mode="constant", cval=0.0)
            msk = (msk > 0.5).astype(np.asarray(mask).dtype)
    if s.flip:
        img = np.flip(img, axis=0)
        msk = None if msk is None else np.flip(msk, axis=0).copy()
    img = np.clip(s.intensity_scale * img + s.intensity_shift, 0.0, 1.0)
    return img.astype(np.asarray(patch).dtype), msk


def apply_cda(patch, mask_patch, rng: np.random.Generator, params: CDAParams = CDAParams()):
    return transform(patch, mask_patch, draw(params, rng))
