"""Two-stage detection (FRST candidates, CNN scoring) and detections CSV I/O."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

from .candidates import Candidate, extract_candidate_patch, propose_candidates
from .classifier import ClassifierConfig, PatchClassifier
from .frst import FRSTParams, frst3d


@dataclass(frozen=True)
class Detection:
    position: Tuple[int, int, int]
    score: float
    subject_id: str = ""


def candidates_for(v, frst: FRSTParams, cfg: ClassifierConfig) -> List[Candidate]:
    s = frst3d(v, frst)
    peak = float(s.max())
    if peak <= 0.0:
        return []
    return propose_candidates(s, cfg.candidate_threshold_fraction * peak, cfg.min_separation_vox,
                              cfg.max_candidates)


def detect(v, frst: FRSTParams, model: PatchClassifier, cfg: ClassifierConfig,
           subject_id: str = "") -> List[Detection]:
    cands = candidates_for(v, frst, cfg)
    if not cands:
        return []
    patches = [extract_candidate_patch(v, c.position, cfg.patch_radius) for c in cands]
    probs = model.predict_proba(patches)
    return [Detection(c.position, float(p), subject_id) for c, p in zip(cands, probs)]


DETECTION_FIELDS = ["subject_id", "x", "y", "z", "score"]


def write_detections(dets: Sequence[Detection], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(DETECTION_FIELDS)
        for d in dets:
            writer.writerow([d.subject_id, *d.position, repr(float(d.score))])


def read_detections(path) -> Dict[str, List[Detection]]:
    out: Dict[str, List[Detection]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            d = Detection((int(row["x"]), int(row["y"]), int(row["z"])), float(row["score"]), row["subject_id"])
            out.setdefault(d.subject_id, []).append(d)
    return out
