"""Experiment stages behind the CLI commands.

Every stage reads its inputs from declared paths, derives its randomness
from the global seed and a stage name, and writes its outputs (plus the
resolved config) into its output directory, so each one can be re-run alone.
"""
from __future__ import annotations

import json
import logging
import zlib
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np

from .config import ExperimentConfig, write_config
from .detection.candidates import extract_candidate_patch
from .detection.classifier import load_classifier, save_classifier, train_classifier
from .detection.pipeline import candidates_for, detect, read_detections, write_detections
from .evaluation import (bootstrap_froc, compare_runs, froc, lesions_from_mask,
                         plot_frocs, read_ground_truth, write_froc_csv, write_ground_truth, write_rows)
from .mask_sampler import sample_pathology_mask
from .phantom import generate_dataset, read_dataset, write_dataset
from .synthesis.training import (BatchSampler, PatchPools, SynthModel, foreground_of, load_checkpoint,
                                 save_checkpoint, synthesize_healthy, synthesize_pathological, train,
                                 write_history)
from .volume_io import HEALTHY, PATHOLOGICAL, PathologyMask, SampleRecord, clip_and_rescale

log = logging.getLogger(__name__)

ARMS = ("real", "synthetic", "combined")
CONFIG_NAME = "effective_config.yaml"


def stage_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def stage_seed(seed: int, name: str) -> int:
    return int(stage_rng(seed, name).integers(2 ** 31))


def _prepare(out) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -------------------------------------------------------------------- datasets


def cmd_make_phantoms(cfg: ExperimentConfig, out) -> Path:
    out = _prepare(out)
    prior = cfg.lesion_prior.build()
    ph = cfg.data.phantom
    records = generate_dataset(ph.n_healthy, ph.n_pathological, ph.build(prior, cfg.seed),
                               seed=stage_seed(cfg.seed, "phantoms"))
    write_dataset(records, out)
    gts = [g for r in records if r.domain == PATHOLOGICAL for g in lesions_from_mask(r.mask, r.subject_id)]
    write_ground_truth(gts, out / "ground_truth.csv")
    write_config(cfg, out / CONFIG_NAME)
    return out


def load_records(cfg: ExperimentConfig, dataset_dir) -> List[SampleRecord]:
    records = read_dataset(dataset_dir)
    if cfg.data.normalize:
        records = [SampleRecord(clip_and_rescale(r.volume, cfg.data.low_pct, cfg.data.high_pct),
                                r.mask, r.domain, r.subject_id) for r in records]
    return records


def split_records(cfg: ExperimentConfig, records: Sequence[SampleRecord]):
    """Hold out the last ``n_test`` pathological subjects (by id) for evaluation."""
    patho = sorted((r for r in records if r.domain == PATHOLOGICAL), key=lambda r: r.subject_id)
    healthy = sorted((r for r in records if r.domain == HEALTHY), key=lambda r: r.subject_id)
    n_test = cfg.data.n_test
    if len(patho) <= n_test:
        raise ValueError(f"need more than n_test={n_test} pathological subjects, found {len(patho)}")
    return healthy, patho[:-n_test], patho[-n_test:]


# ------------------------------------------------------------------- synthesis


def cmd_train_synth(cfg: ExperimentConfig, dataset_dir, out) -> Path:
    out = _prepare(out)
    healthy, train_patho, _ = split_records(cfg, load_records(cfg, dataset_dir))
    if not healthy:
        raise ValueError("synthesis training needs healthy subjects")
    spec = cfg.patch.build()
    pools = PatchPools.from_records(healthy + train_patho, spec)
    gen_cfg, disc_cfg, weights, optim = cfg.synthesis.build()
    model = SynthModel(gen_cfg, disc_cfg, weights, optim, seed=stage_seed(cfg.seed, "synth-init"))
    spacing = healthy[0].volume.spacing
    sampler = BatchSampler(pools, cfg.lesion_prior.build(), spacing, optim.batch_size,
                           stage_rng(cfg.seed, "synth-batches"))
    history = train(model, sampler, cfg.synthesis.steps, seed=stage_seed(cfg.seed, "synth-train"))
    save_checkpoint(model, out / "synth.pt")
    write_history(history, out / "loss_history.csv")
    write_config(cfg, out / CONFIG_NAME)
    return out / "synth.pt"


def cmd_synthesize(cfg: ExperimentConfig, dataset_dir, checkpoint, direction: str, out) -> Path:
    """h2p: lesions painted into training healthy subjects at sampled masks.
    p2h: lesions removed from training pathological subjects."""
    if direction not in ("h2p", "p2h"):
        raise ValueError(f"direction must be 'h2p' or 'p2h', got {direction!r}")
    out = _prepare(out)
    healthy, train_patho, _ = split_records(cfg, load_records(cfg, dataset_dir))
    model = load_checkpoint(checkpoint)
    spec = cfg.patch.build()
    prior = cfg.lesion_prior.build()
    rng = stage_rng(cfg.seed, f"synthesize-{direction}")
    records = []
    if direction == "h2p":
        for rec in healthy:
            for k in range(cfg.synthesis.synthetic_per_healthy):
                y = sample_pathology_mask(foreground_of(rec.volume.data), rec.volume.spacing, prior, rng)
                vol = synthesize_pathological(model, rec.volume, y, spec)
                domain = PATHOLOGICAL if y.data.any() else HEALTHY
                records.append(SampleRecord(vol, y, domain, f"synth_{rec.subject_id}_{k}"))
    else:
        for rec in train_patho:
            vol = synthesize_healthy(model, rec.volume, rec.mask, spec)
            records.append(SampleRecord(vol, PathologyMask(np.zeros_like(rec.mask.data)), HEALTHY,
                                        f"synth_{rec.subject_id}"))
    write_dataset(records, out)
    if direction == "h2p":
        gts = [g for r in records for g in lesions_from_mask(r.mask, r.subject_id)]
        write_ground_truth(gts, out / "ground_truth.csv")
    write_config(cfg, out / CONFIG_NAME)
    return out


# ------------------------------------------------------------------- detection


def _rounded(c):
    return tuple(int(round(v)) for v in c)


def lesion_and_negative_patches(cfg: ExperimentConfig, records: Sequence[SampleRecord]):
    """Positives at lesion centroids; negatives at the strongest FRST candidates farther
    than the hit radius from every lesion."""
    frst = cfg.frst.build()
    ccfg = cfg.classifier.build()
    radius = ccfg.patch_radius
    hit = cfg.evaluation.hit_radius_mm
    pos, neg = [], []
    for rec in records:
        lesions = lesions_from_mask(rec.mask, rec.subject_id)
        for g in lesions:
            pos.append(extract_candidate_patch(rec.volume, _rounded(g.centroid), radius))
        centroids = np.array([g.centroid for g in lesions], dtype=float).reshape(-1, 3)
        sp = np.asarray(rec.volume.spacing)
        n_neg = 0
        for c in candidates_for(rec.volume, frst, ccfg):
            if len(centroids):
                d = np.sqrt((((np.asarray(c.position) - centroids) * sp) ** 2).sum(1)).min()
                if d <= hit:
                    continue
            neg.append(extract_candidate_patch(rec.volume, c.position, radius))
            n_neg += 1
            if n_neg >= cfg.classifier.max_negatives_per_volume:
                break
    return pos, neg


def _subsample(items, n, rng):
    idx = np.sort(rng.choice(len(items), size=n, replace=False))
    return [items[i] for i in idx]


def assemble_training_pool(cfg: ExperimentConfig, arm: str, real_records, synthetic_records, rng):
    """Positive/negative patch lists for one arm; ``combined`` mixes at the configured ratio."""
    if arm not in ARMS:
        raise ValueError(f"arm must be one of {ARMS}, got {arm!r}")
    real = lesion_and_negative_patches(cfg, real_records) if arm in ("real", "combined") else ([], [])
    synth = lesion_and_negative_patches(cfg, synthetic_records) if arm in ("synthetic", "combined") else ([], [])
    if arm == "real":
        if not real[0]:
            raise ValueError("arm 'real' has no real lesion samples")
        return real
    if arm == "synthetic":
        if not synth[0]:
            raise ValueError("arm 'synthetic' has no synthetic lesion samples")
        return synth
    ratio = cfg.classifier.synthetic_to_real_ratio
    out = []
    for r_items, s_items in zip(real, synth):
        n_real = min(len(r_items), int(np.floor(len(s_items) / ratio)))
        n_syn = int(round(ratio * n_real))
        if n_real == 0 or n_syn == 0:
            raise ValueError("arm 'combined' needs both real and synthetic samples")
        out.append(_subsample(r_items, n_real, rng) + _subsample(s_items, n_syn, rng))
    return out[0], out[1]


def cmd_train_detect(cfg: ExperimentConfig, dataset_dir, arm: str, cda: bool, out,
                     synthetic_dir=None) -> Path:
    out = _prepare(out)
    _, train_patho, _ = split_records(cfg, load_records(cfg, dataset_dir))
    synthetic = []
    if arm in ("synthetic", "combined"):
        if synthetic_dir is None:
            raise ValueError(f"arm {arm!r} needs a synthetic dataset directory")
        synthetic = [r for r in read_dataset(synthetic_dir) if r.domain == PATHOLOGICAL]
    tag = f"{arm}-{'cda' if cda else 'nocda'}"
    rng = stage_rng(cfg.seed, f"detect-{tag}")
    pos, neg = assemble_training_pool(cfg, arm, train_patho, synthetic, rng)
    model, history = train_classifier(pos, neg, cfg.classifier.build(cda_enabled=cda), rng)
    save_classifier(model, out / "classifier.pt")
    with open(out / "pool.json", "w") as fh:
        json.dump({"arm": arm, "cda": cda, "positives": len(pos), "negatives": len(neg)}, fh)
    with open(out / "train_history.csv", "w") as fh:
        fh.write("step,loss\n")
        fh.writelines(f"{s},{v!r}\n" for s, v in history)
    write_config(cfg, out / CONFIG_NAME)
    return out / "classifier.pt"


def cmd_detect(cfg: ExperimentConfig, dataset_dir, checkpoint, out) -> Path:
    """Detections on the held-out test subjects, plus their ground truth."""
    out = _prepare(out)
    _, _, test = split_records(cfg, load_records(cfg, dataset_dir))
    model = load_classifier(checkpoint)
    frst = cfg.frst.build()
    ccfg = model.cfg
    dets = [d for rec in test for d in detect(rec.volume, frst, model, ccfg, rec.subject_id)]
    write_detections(dets, out / "detections.csv")
    gts = [g for rec in test for g in lesions_from_mask(rec.mask, rec.subject_id)]
    write_ground_truth(gts, out / "ground_truth.csv")
    write_config(cfg, out / CONFIG_NAME)
    return out / "detections.csv"


# ------------------------------------------------------------------ evaluation


def evaluate_detections(cfg: ExperimentConfig, detections_csv, ground_truth_csv, spacing=(1.0, 1.0, 1.0),
                        rng_name: str = "evaluate"):
    """Returns ``(curve, banded)``: the raw threshold-sweep FROC and its bootstrap band on a grid."""
    dets = read_detections(detections_csv)
    gts = read_ground_truth(ground_truth_csv)
    for sid in gts:
        dets.setdefault(sid, [])
    ev = cfg.evaluation
    curve = froc(dets, gts, ev.hit_radius_mm, spacing)
    banded, _ = bootstrap_froc(dets, gts, ev.n_boot, ev.level, stage_rng(cfg.seed, rng_name),
                               ev.hit_radius_mm, spacing)
    return curve, banded


def cmd_evaluate(cfg: ExperimentConfig, detections: Sequence[Tuple[str, str]], ground_truth, out,
                 spacing=(1.0, 1.0, 1.0)):
    """``detections`` is a list of (label, csv path). Writes per-run FROC CSVs, a plot and the table."""
    out = _prepare(out)
    runs, bands = [], []
    for label, path in detections:
        curve, banded = evaluate_detections(cfg, path, ground_truth, spacing, rng_name=f"evaluate-{label}")
        write_froc_csv(curve, out / f"froc_{label}_points.csv")
        write_froc_csv(banded, out / f"froc_{label}.csv")
        runs.append((label, curve))
        bands.append((label, banded))
    rows = compare_runs(runs, cfg.evaluation.fp_rate, cfg.evaluation.sensitivity)
    write_rows(rows, out / "report.csv")
    plot_frocs(bands, out / "froc.png", cfg.evaluation.fp_rate)
    write_config(cfg, out / CONFIG_NAME)
    return rows


def cmd_run_experiment(cfg: ExperimentConfig, out) -> List[dict]:
    """Phantoms (unless a dataset is configured), synthesis, six detection arms, report."""
    out = _prepare(out)
    write_config(cfg, out / CONFIG_NAME)
    if cfg.data.dataset_dir:
        dataset = Path(cfg.data.dataset_dir)
    else:
        dataset = cmd_make_phantoms(cfg, out / "dataset")
    ckpt = cmd_train_synth(cfg, dataset, out / "synthesis")
    synth_dir = cmd_synthesize(cfg, dataset, ckpt, "h2p", out / "synthetic")
    spacing = read_dataset(dataset)[0].volume.spacing
    labelled = []
    for cda in (False, True):
        for arm in ARMS:
            tag = f"{arm}{'+cDA' if cda else ''}"
            arm_dir = out / "arms" / tag
            clf = cmd_train_detect(cfg, dataset, arm, cda, arm_dir, synthetic_dir=synth_dir)
            dets = cmd_detect(cfg, dataset, clf, arm_dir)
            labelled.append((tag, str(dets)))
    gt = out / "arms" / "real" / "ground_truth.csv"
    return cmd_evaluate(cfg, labelled, gt, out / "report", spacing)
