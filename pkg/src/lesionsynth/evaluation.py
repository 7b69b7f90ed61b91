"""FROC analysis: detection/lesion matching, threshold sweep, operating points,
subject-level bootstrap confidence bands and run comparison reports."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

DEFAULT_HIT_RADIUS_MM = 5.0


class SensitivityUnreachable(ValueError):
    pass


@dataclass(frozen=True)
class GroundTruthLesion:
    subject_id: str
    centroid: Tuple[float, float, float]
    voxels: Optional[np.ndarray] = field(default=None, compare=False)


@dataclass
class FROCCurve:
    points: List[Tuple[float, float]]
    ci_lower: Optional[List[float]] = None
    ci_upper: Optional[List[float]] = None

    def __post_init__(self):
        self.points = [(float(f), float(s)) for f, s in self.points]
        fps = [p[0] for p in self.points]
        sens = [p[1] for p in self.points]
        if any(f < 0 for f in fps) or any(not 0.0 <= s <= 1.0 for s in sens):
            raise ValueError("FROC points need fps >= 0 and sensitivity in [0, 1]")
        if any(b < a for a, b in zip(fps, fps[1:])) or any(b < a for a, b in zip(sens, sens[1:])):
            raise ValueError("FROC points must be sorted with non-decreasing sensitivity")
        if (self.ci_lower is None) != (self.ci_upper is None):
            raise ValueError("ci_lower and ci_upper must be given together")
        if self.ci_lower is not None:
            if not (len(self.ci_lower) == len(self.ci_upper) == len(self.points)):
                raise ValueError("confidence band length must match the number of points")
            if any(not lo <= s <= hi for lo, s, hi in zip(self.ci_lower, sens, self.ci_upper)):
                raise ValueError("confidence band must contain the point estimate")

    @property
    def fps(self):
        return np.array([p[0] for p in self.points])

    @property
    def sensitivities(self):
        return np.array([p[1] for p in self.points])


@dataclass
class MatchResult:
    tp: List[Tuple[object, GroundTruthLesion]]
    fp: List[object]
    fn: List[GroundTruthLesion]


def _spacing_for(spacing, subject_id):
    if isinstance(spacing, Mapping):
        return np.asarray(spacing.get(subject_id, (1.0, 1.0, 1.0)), dtype=float)
    return np.asarray(spacing, dtype=float)


def match_detections(dets: Sequence, gts: Sequence[GroundTruthLesion], hit_radius_mm: float = DEFAULT_HIT_RADIUS_MM,
                     spacing=(1.0, 1.0, 1.0)) -> MatchResult:
    """Score-prioritised maximum matching of detections to lesions.

    Detections are processed by descending score; each one is matched if an
    augmenting path exists among lesions within ``hit_radius_mm`` (earlier
    matches may be re-assigned to other lesions but never dropped). This gives
    the largest possible TP count, and among maximal matchings the one that
    favours higher-scored detections.
    """
    sp = np.asarray(spacing, dtype=float)
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    centroids = np.array([g.centroid for g in gts], dtype=float).reshape(-1, 3)
    adjacency: Dict[int, List[int]] = {}
    for i, d in enumerate(dets):
        dist = np.sqrt((((np.asarray(d.position, float) - centroids) * sp) ** 2).sum(1)) if len(gts) else np.zeros(0)
        near = np.nonzero(dist <= hit_radius_mm)[0]
        adjacency[i] = [int(j) for j in near[np.argsort(dist[near], kind="stable")]]

    owner: Dict[int, int] = {}  # lesion -> detection

    def augment(i, seen):
        for j in adjacency[i]:
            if j in seen:
                continue
            seen.add(j)
            if j not in owner or augment(owner[j], seen):
                owner[j] = i
                return True
        return False

    for i in order:
        augment(i, set())
    matched = {i: j for j, i in owner.items()}
    tp = [(dets[i], gts[matched[i]]) for i in order if i in matched]
    fp = [dets[i] for i in order if i not in matched]
    fn = [g for j, g in enumerate(gts) if j not in owner]
    return MatchResult(tp, fp, fn)


# ------------------------------------------------------------------ FROC sweep


@dataclass
class _SubjectStats:
    scores: np.ndarray
    hits: np.ndarray
    n_lesions: int


def _subject_stats(dets_by_subject, gts_by_subject, hit_radius_mm, spacing) -> List[_SubjectStats]:
    subjects = sorted(set(dets_by_subject) | set(gts_by_subject))
    stats = []
    for sid in subjects:
        dets = list(dets_by_subject.get(sid, []))
        gts = list(gts_by_subject.get(sid, []))
        res = match_detections(dets, gts, hit_radius_mm, _spacing_for(spacing, sid))
        tp_ids = {id(d) for d, _ in res.tp}
        stats.append(_SubjectStats(np.array([d.score for d in dets], dtype=float),
                                   np.array([id(d) in tp_ids for d in dets], dtype=bool), len(gts)))
    return stats


def _curve_arrays(stats: Sequence[_SubjectStats]):
    """(fps_per_patient, sensitivity) at every distinct score threshold, descending."""
    n_subjects = len(stats)
    n_lesions = sum(s.n_lesions for s in stats)
    if n_subjects == 0:
        return np.zeros(1), np.zeros(1)
    scores = np.concatenate([s.scores for s in stats]) if stats else np.zeros(0)
    hits = np.concatenate([s.hits for s in stats]) if stats else np.zeros(0, bool)
    if scores.size == 0:
        return np.zeros(1), np.zeros(1)
    order = np.argsort(-scores, kind="stable")
    scores, hits = scores[order], hits[order]
    tp = np.cumsum(hits)
    fp = np.cumsum(~hits)
    # last index of each run of equal scores = the operating point for that threshold
    last = np.nonzero(np.append(scores[1:] != scores[:-1], True))[0]
    fps = fp[last] / n_subjects
    sens = tp[last] / n_lesions if n_lesions else np.full(len(last), np.nan)
    return fps.astype(float), sens.astype(float)


def froc(dets_by_subject, gts_by_subject, hit_radius_mm: float = DEFAULT_HIT_RADIUS_MM,
         spacing=(1.0, 1.0, 1.0)) -> FROCCurve:
    """Sweep the threshold over all distinct scores; lesion-level sensitivity pooled over subjects.

    With no detections at all the curve is the single point (0, 0).
    """
    if sum(len(v) for v in gts_by_subject.values()) == 0:
        raise ValueError("FROC needs at least one ground-truth lesion")
    fps, sens = _curve_arrays(_subject_stats(dets_by_subject, gts_by_subject, hit_radius_mm, spacing))
    points = []
    for p in zip(fps.tolist(), sens.tolist()):
        if not points or points[-1] != p:
            points.append(p)
    return FROCCurve(points)


def _collapsed(fps: np.ndarray, sens: np.ndarray):
    """One sensitivity (the highest) per distinct FP value."""
    uniq, idx = np.unique(fps, return_inverse=True)
    best = np.full(len(uniq), -np.inf)
    np.maximum.at(best, idx, sens)
    return uniq, best


def sensitivity_at_fp(curve: FROCCurve, fp_rate: float = 10.0) -> float:
    """Linear interpolation, clamped to the end points outside the curve's FP range."""
    if not curve.points:
        return 0.0
    fps, sens = _collapsed(curve.fps, curve.sensitivities)
    return float(np.interp(fp_rate, fps, sens))


def fp_at_sensitivity(curve: FROCCurve, sens: float = 0.9) -> float:
    """Smallest interpolated FP rate at which the curve reaches ``sens``."""
    fps, s = curve.fps, curve.sensitivities
    reached = np.nonzero(s >= sens)[0]
    if len(reached) == 0:
        raise SensitivityUnreachable(f"sensitivity unreachable: curve peaks at {s.max() if len(s) else 0:.3f} < {sens}")
    i = int(reached[0])
    if i == 0:
        return float(fps[0])
    f0, f1, s0, s1 = fps[i - 1], fps[i], s[i - 1], s[i]
    return float(f0 + (sens - s0) / (s1 - s0) * (f1 - f0))


# -------------------------------------------------------------------- bootstrap


def _interp_curve(fps, sens, grid):
    uniq, best = _collapsed(fps, sens)
    return np.interp(grid, uniq, best)


def bootstrap_froc(dets_by_subject, gts_by_subject, n_boot: int = 1000, level: float = 0.95,
                   rng: Optional[np.random.Generator] = None, hit_radius_mm: float = DEFAULT_HIT_RADIUS_MM,
                   spacing=(1.0, 1.0, 1.0), grid: Optional[np.ndarray] = None, n_grid: int = 101):
    """Subject-level bootstrap band on a common FP grid.

    Returns ``(curve, samples)``: ``curve`` carries the point estimate at each
    grid FP rate plus empirical ``(1-level)/2`` and ``1-(1-level)/2`` quantiles,
    widened where needed so the band always contains the point estimate;
    ``samples`` is the ``(n_boot, len(grid))`` matrix of resampled sensitivities.
    """
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    rng = rng if rng is not None else np.random.default_rng()
    stats = _subject_stats(dets_by_subject, gts_by_subject, hit_radius_mm, spacing)
    if sum(s.n_lesions for s in stats) == 0:
        raise ValueError("bootstrap needs at least one ground-truth lesion")
    fps, sens = _curve_arrays(stats)
    if grid is None:
        grid = np.linspace(0.0, max(float(fps.max()), 0.0), n_grid)
    grid = np.asarray(grid, dtype=float)
    point = _interp_curve(fps, sens, grid)

    n = len(stats)
    samples = np.empty((n_boot, len(grid)))
    for b in range(n_boot):
        pick = rng.integers(n, size=n)
        bf, bs = _curve_arrays([stats[i] for i in pick])
        samples[b] = np.nan if np.isnan(bs).all() else _interp_curve(bf, bs, grid)
    alpha = (1.0 - level) / 2.0
    lo = np.nanquantile(samples, alpha, axis=0)
    hi = np.nanquantile(samples, 1.0 - alpha, axis=0)
    lo = np.minimum(lo, point)
    hi = np.maximum(hi, point)
    curve = FROCCurve(list(zip(grid.tolist(), point.tolist())), lo.tolist(), hi.tolist())
    return curve, samples


# ----------------------------------------------------------------------- reports


def compare_runs(runs: Sequence[Tuple[str, FROCCurve]], fp_rate: float = 10.0, sens: float = 0.9):
    """One row per run: label, sensitivity at ``fp_rate``, FP rate at ``sens`` (NaN if unreachable)."""
    sens_col = f"sens@{fp_rate:g}FP"
    fp_col = f"FP@{sens * 100:g}%sens"
    rows = []
    for label, curve in runs:
        try:
            fp_val = fp_at_sensitivity(curve, sens)
        except SensitivityUnreachable:
            fp_val = math.nan
        rows.append({"label": label, sens_col: sensitivity_at_fp(curve, fp_rate), fp_col: fp_val})
    return rows


def write_rows(rows, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()) if rows else ["label"])
        writer.writeheader()
        writer.writerows(rows)


def write_froc_csv(curve: FROCCurve, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fp_per_patient", "sensitivity", "ci_lo", "ci_hi"])
        for k, (f, s) in enumerate(curve.points):
            lo = curve.ci_lower[k] if curve.ci_lower is not None else ""
            hi = curve.ci_upper[k] if curve.ci_upper is not None else ""
            writer.writerow([f, s, lo, hi])


def read_froc_csv(path) -> FROCCurve:
    pts, lo, hi = [], [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            pts.append((float(row["fp_per_patient"]), float(row["sensitivity"])))
            lo.append(float(row["ci_lo"]) if row["ci_lo"] else None)
            hi.append(float(row["ci_hi"]) if row["ci_hi"] else None)
    if pts and all(v is not None for v in lo + hi):
        return FROCCurve(pts, lo, hi)
    return FROCCurve(pts)


def read_ground_truth(path) -> Dict[str, List[GroundTruthLesion]]:
    out: Dict[str, List[GroundTruthLesion]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            g = GroundTruthLesion(row["subject_id"], (float(row["x"]), float(row["y"]), float(row["z"])))
            out.setdefault(g.subject_id, []).append(g)
    return out


def write_ground_truth(gts: Sequence[GroundTruthLesion], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject_id", "x", "y", "z"])
        for g in gts:
            writer.writerow([g.subject_id, *g.centroid])


def plot_frocs(runs: Sequence[Tuple[str, FROCCurve]], path, fp_rate: float = 10.0) -> None:
    """FROC curves with shaded CI bands; vertical line at the reporting FP rate."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4.5))
    for label, curve in runs:
        fps, sens = curve.fps, curve.sensitivities
        line, = ax.plot(fps, sens, label=label, drawstyle="default")
        if curve.ci_lower is not None:
            ax.fill_between(fps, curve.ci_lower, curve.ci_upper, color=line.get_color(), alpha=0.2)
    ax.axvline(fp_rate, color="grey", linestyle=":", linewidth=1)
    ax.set_xlabel("False positives per patient")
    ax.set_ylabel("Sensitivity")
    ax.set_ylim(0, 1.02)
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)


def lesions_from_mask(mask, subject_id: str) -> List[GroundTruthLesion]:
    """Connected components (26-neighbour) of a mask as ground-truth lesions."""
    from scipy import ndimage

    data = np.asarray(getattr(mask, "data", mask))
    labels, n = ndimage.label(data, structure=np.ones((3, 3, 3), bool))
    out = []
    for k in range(1, n + 1):
        vox = np.argwhere(labels == k)
        out.append(GroundTruthLesion(subject_id, tuple(float(c) for c in vox.mean(0)), vox))
    return out
