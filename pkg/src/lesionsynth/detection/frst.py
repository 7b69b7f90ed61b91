"""Three-dimensional fast radial symmetry transform, dark polarity only.

Every voxel whose gradient magnitude exceeds ``gradient_threshold_fraction *
max|g|`` votes at the voxel ``radius`` steps *against* its gradient direction
(towards the darker side). Per radius the orientation count ``O`` is clamped
at ``k_n`` and combined with the magnitude sum ``M`` as
``F = (M / k_n) * (min(O, k_n) / k_n) ** alpha``; ``F`` is smoothed with a
Gaussian of sigma ``smoothing * n`` and the result averaged over radii.

The vote accumulation runs in a compiled kernel when it is available and in
numpy otherwise. Set ``LESIONSYNTH_PURE_PYTHON=1`` to force the numpy path.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np
from scipy import ndimage

from . import _frst_py

try:
    from . import _frst_ext
except ImportError:  # extension not built
    _frst_ext = None

_KERNELS = {"python": _frst_py.accumulate_votes}
if _frst_ext is not None:
    _KERNELS["cython"] = _frst_ext.accumulate_votes

if _frst_ext is not None and not os.environ.get("LESIONSYNTH_PURE_PYTHON"):
    BACKEND = "cython"
else:
    BACKEND = "python"


def available_backends():
    return sorted(_KERNELS)


@dataclass(frozen=True)
class FRSTParams:
    radii_vox: Tuple[int, ...] = (2, 3, 4, 5)
    alpha: float = 2.0
    gradient_threshold_fraction: float = 0.0
    smoothing: float = 0.25
    kn: Optional[Dict[int, float]] = None

    def __post_init__(self):
        if not self.radii_vox or any(int(r) < 1 for r in self.radii_vox):
            raise ValueError("radii_vox must be a non-empty set of integers >= 1")
        if self.alpha <= 0:
            raise ValueError("alpha must be > 0")
        if not 0.0 <= self.gradient_threshold_fraction < 1.0:
            raise ValueError("gradient_threshold_fraction must lie in [0, 1)")
        if self.smoothing <= 0:
            raise ValueError("smoothing must be > 0")

    def k(self, n: int) -> float:
        if self.kn is not None and n in self.kn:
            return float(self.kn[n])
        return 8.0 if n == 1 else 9.9


def image_gradient(data: np.ndarray):
    """Central differences inside, one-sided differences on the faces (np.gradient)."""
    gx, gy, gz = np.gradient(np.asarray(data, dtype=np.float64))
    return (np.ascontiguousarray(gx), np.ascontiguousarray(gy), np.ascontiguousarray(gz))


def frst3d(v, params: FRSTParams = FRSTParams(), backend: Optional[str] = None) -> np.ndarray:
    data = np.asarray(getattr(v, "data", v), dtype=np.float64)
    kernel = _KERNELS[backend or BACKEND]
    gx, gy, gz = image_gradient(data)
    mag = np.sqrt(gx * gx + gy * gy + gz * gz)
    peak = mag.max() if mag.size else 0.0
    out = np.zeros(data.shape, dtype=np.float64)
    if peak <= 0.0:
        return out
    threshold = params.gradient_threshold_fraction * peak
    for n in params.radii_vox:
        n = int(n)
        orient, magnitude = kernel(gx, gy, gz, mag, threshold, n)
        kn = params.k(n)
        f = (magnitude / kn) * (np.minimum(orient, kn) / kn) ** params.alpha
        out += ndimage.gaussian_filter(f, sigma=params.smoothing * n, mode="constant", cval=0.0)
    return out / len(params.radii_vox)
