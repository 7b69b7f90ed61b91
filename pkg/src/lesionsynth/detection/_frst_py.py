"""Pure numpy FRST vote accumulation; same contract as the compiled kernel."""
import numpy as np


def _round_half_away(x):
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def accumulate_votes(gx, gy, gz, mag, threshold, radius):
    shape = mag.shape
    voters = (mag > threshold) & (mag > 0.0)
    idx = np.nonzero(voters)
    m = mag[idx]
    target = []
    for axis, g in enumerate((gx, gy, gz)):
        target.append(idx[axis] - _round_half_away(g[idx] / m * radius).astype(np.intp))
    ok = np.ones(m.shape, dtype=bool)
    for axis, t in enumerate(target):
        ok &= (t >= 0) & (t < shape[axis])
    flat = np.ravel_multi_index(tuple(t[ok] for t in target), shape)
    size = int(np.prod(shape))
    orient = np.bincount(flat, minlength=size).astype(np.float64).reshape(shape)
    magnitude = np.bincount(flat, weights=m[ok], minlength=size).reshape(shape)
    return orient, magnitude
