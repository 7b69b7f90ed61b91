"""Peak picking on a symmetry map and candidate-centred patch extraction."""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Tuple

import numpy as np
from scipy import ndimage


@dataclass(frozen=True)
class Candidate:
    position: Tuple[int, int, int]
    symmetry_score: float


def local_maxima(s: np.ndarray, threshold: float) -> np.ndarray:
    """Voxels equal to their 3x3x3 neighbourhood maximum and strictly above threshold."""
    peak = ndimage.maximum_filter(s, size=3, mode="constant", cval=-np.inf)
    return np.argwhere((s == peak) & (s > threshold))


def propose_candidates(s: np.ndarray, threshold: float, min_separation_vox: float,
                       max_candidates: int | None = None) -> List[Candidate]:
    """Greedy non-maximum suppression over local maxima, highest score first.

    A peak is suppressed when it lies closer than ``min_separation_vox`` to an
    already accepted one. Ties are broken by voxel index order.
    """
    s = np.asarray(s, dtype=np.float64)
    peaks = local_maxima(s, threshold)
    if len(peaks) == 0:
        return []
    scores = s[tuple(peaks.T)]
    order = np.lexsort((*peaks.T[::-1], -scores))
    kept: List[np.ndarray] = []
    out = []
    for i in order:
        p = peaks[i]
        if kept:
            d2 = ((np.asarray(kept) - p) ** 2).sum(1)
            if (d2 < min_separation_vox ** 2).any():
                continue
        kept.append(p)
        out.append(Candidate(tuple(int(c) for c in p), float(scores[i])))
        if max_candidates is not None and len(out) >= max_candidates:
            break
    return out


def extract_candidate_patch(v, position, radius: int) -> np.ndarray:
    """Cube of side ``2*radius+1`` centred on ``position``; zero outside the volume."""
    data = np.asarray(getattr(v, "data", v))
    pos = getattr(position, "position", position)
    side = 2 * radius + 1
    out = np.zeros((side, side, side), dtype=data.dtype)
    src, dst = [], []
    for c, size in zip(pos, data.shape):
        lo, hi = c - radius, c + radius + 1
        src.append(slice(max(lo, 0), min(hi, size)))
        dst.append(slice(max(lo, 0) - lo, side - (hi - min(hi, size))))
    out[tuple(dst)] = data[tuple(src)]
    return out
