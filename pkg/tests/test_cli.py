import csv
import json

import numpy as np
import pytest
import yaml
from pydantic import ValidationError

from lesionsynth import experiment as ex
from lesionsynth.cli import main
from lesionsynth.config import ExperimentConfig, dump_config, load_config
from lesionsynth.detection import classifier as clf_mod
from lesionsynth.detection.candidates import extract_candidate_patch
from lesionsynth.evaluation import lesions_from_mask
from lesionsynth.phantom import read_dataset

TINY = {
    "seed": 3,
    "data": {"phantom": {"shape": [40, 40, 20], "spacing": [1.0, 1.0, 1.0], "n_healthy": 2,
                         "n_pathological": 4, "vessel_count": 1},
             "n_test": 2},
    "patch": {"patch_shape": [40, 40, 10]},
    "lesion_prior": {"count_range": [1, 2], "radius_range_mm": [1.5, 2.5], "foreground_margin_vox": 2},
    "synthesis": {"generator": {"base_channels": 2, "num_downsamples": 1, "num_resblocks": 1},
                  "discriminator": {"base_channels": 2, "num_layers": 2},
                  "loss_weights": {"critic_steps_per_gen_step": 1},
                  "optimizer": {"batch_size": 2}, "steps": 2, "synthetic_per_healthy": 1},
    "classifier": {"patch_radius": 4, "channels": [2, 2, 2, 2], "steps": 3, "batch_size": 4,
                   "max_candidates": 30, "max_negatives_per_volume": 5},
    "evaluation": {"n_boot": 20},
}


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "cfg.yaml"
    p.write_text(yaml.safe_dump(TINY))
    return p


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = ExperimentConfig.model_validate(TINY)
    rows = ex.cmd_run_experiment(cfg, root / "out")
    return cfg, root / "out", rows


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ------------------------------------------------------------------- config


def test_defaults_carry_published_settings():
    cfg = ExperimentConfig()
    assert cfg.patch.patch_shape == (160, 146, 32) and cfg.patch.z_overlap_fraction == 0.5
    assert (cfg.data.low_pct, cfg.data.high_pct) == (0.0, 99.5)
    o = cfg.synthesis.optimizer
    assert (o.beta1, o.beta2, o.lr, o.batch_size) == (0.5, 0.99, 1e-4, 4)
    assert cfg.classifier.synthetic_to_real_ratio == 1.0


def test_config_round_trip(cfg_path, tmp_path):
    cfg = load_config(cfg_path)
    (tmp_path / "again.yaml").write_text(dump_config(cfg))
    assert load_config(tmp_path / "again.yaml") == cfg
    assert load_config(cfg_path, seed=9).seed == 9


def test_unknown_keys_rejected(tmp_path):
    (tmp_path / "bad.yaml").write_text("synthesis:\n  stepz: 3\n")
    with pytest.raises(ValidationError):
        load_config(tmp_path / "bad.yaml")
    (tmp_path / "bad2.yaml").write_text("data:\n  low_pct: 60\n  high_pct: 50\n")
    with pytest.raises(ValidationError):
        load_config(tmp_path / "bad2.yaml")


# ---------------------------------------------------------------- detection pools


def test_real_arm_without_real_lesions_errors():
    cfg = ExperimentConfig.model_validate(TINY)
    with pytest.raises(ValueError, match="no real lesion"):
        ex.assemble_training_pool(cfg, "real", [], [], np.random.default_rng(0))
    with pytest.raises(ValueError):
        ex.assemble_training_pool(cfg, "bogus", [], [], np.random.default_rng(0))


def test_combined_pool_is_balanced(tiny_run):
    cfg, out, _ = tiny_run
    _, train_patho, _ = ex.split_records(cfg, ex.load_records(cfg, out / "dataset"))
    synth = [r for r in read_dataset(out / "synthetic") if r.domain == "pathological"]
    n_real = sum(len(lesions_from_mask(r.mask, r.subject_id)) for r in train_patho)
    n_syn = sum(len(lesions_from_mask(r.mask, r.subject_id)) for r in synth)
    pos, neg = ex.assemble_training_pool(cfg, "combined", train_patho, synth, np.random.default_rng(0))
    assert len(pos) == 2 * min(n_real, n_syn)
    pool = json.loads((out / "arms" / "combined" / "pool.json").read_text())
    assert pool["positives"] == 2 * min(n_real, n_syn)


def test_real_pool_patches_are_extraction_output(tiny_run):
    cfg, out, _ = tiny_run
    _, train_patho, _ = ex.split_records(cfg, ex.load_records(cfg, out / "dataset"))
    pos, _ = ex.assemble_training_pool(cfg, "real", train_patho, [], np.random.default_rng(0))
    expected = [extract_candidate_patch(r.volume, tuple(int(round(c)) for c in g.centroid), 4)
                for r in train_patho for g in lesions_from_mask(r.mask, r.subject_id)]
    assert len(pos) == len(expected)
    for a, b in zip(pos, expected):
        assert np.array_equal(a, b)


def test_cda_off_never_touches_patches(monkeypatch):
    def boom(*a, **k):
        raise AssertionError("augmentation applied with cda disabled")

    monkeypatch.setattr(clf_mod, "apply_cda", boom)
    rng = np.random.default_rng(0)
    pos = [rng.random((9, 9, 9)).astype(np.float32) for _ in range(3)]
    cfg = clf_mod.ClassifierConfig(patch_radius=4, channels=(2, 2, 2, 2), steps=2, batch_size=4)
    clf_mod.train_classifier(pos, pos, cfg, rng)
    with pytest.raises(AssertionError):
        clf_mod.train_classifier(pos, pos, clf_mod.ClassifierConfig(patch_radius=4, channels=(2, 2, 2, 2), steps=1,
                                                                    batch_size=4, cda_enabled=True), rng)


# --------------------------------------------------------------- experiment


def test_run_experiment_report(tiny_run):
    _, out, rows = tiny_run
    assert [r["label"] for r in rows] == ["real", "synthetic", "combined", "real+cDA", "synthetic+cDA",
                                          "combined+cDA"]
    assert all(0.0 <= r["sens@10FP"] <= 1.0 for r in rows)
    assert len(read_csv(out / "report" / "report.csv")) == 6
    for r in rows:
        pts = read_csv(out / "report" / f"froc_{r['label']}_points.csv")
        f = [float(p["fp_per_patient"]) for p in pts]
        s = [float(p["sensitivity"]) for p in pts]
        assert f == sorted(f) and s == sorted(s)
    assert (out / "report" / "froc.png").exists()
    assert (out / "synthesis" / "effective_config.yaml").exists()


def test_run_experiment_deterministic(tiny_run, tmp_path):
    cfg, out, rows = tiny_run
    again = ex.cmd_run_experiment(cfg, tmp_path / "again")
    assert again == rows
    a = (out / "arms" / "combined+cDA" / "detections.csv").read_text()
    b = (tmp_path / "again" / "arms" / "combined+cDA" / "detections.csv").read_text()
    assert a == b


def test_stagewise_cli_matches_run_experiment(tiny_run, cfg_path, tmp_path, capsys):
    _, _, rows = tiny_run
    d = tmp_path
    assert main(["make-phantoms", "--config", str(cfg_path), "--out", str(d / "ds")]) == 0
    assert main(["train-synth", "--config", str(cfg_path), "--dataset", str(d / "ds"), "--out", str(d / "syn")]) == 0
    assert main(["synthesize", "--config", str(cfg_path), "--dataset", str(d / "ds"), "--checkpoint",
                 str(d / "syn" / "synth.pt"), "--direction", "h2p", "--out", str(d / "sd")]) == 0
    dets = []
    for cda in (False, True):
        for arm in ex.ARMS:
            tag = f"{arm}{'+cDA' if cda else ''}"
            argv = ["train-detect", "--config", str(cfg_path), "--dataset", str(d / "ds"), "--synthetic",
                    str(d / "sd"), "--arm", arm, "--out", str(d / tag)]
            assert main(argv + (["--cda"] if cda else [])) == 0
            assert main(["detect", "--config", str(cfg_path), "--dataset", str(d / "ds"), "--checkpoint",
                         str(d / tag / "classifier.pt"), "--out", str(d / tag)]) == 0
            dets += ["--detections", f"{tag}={d / tag / 'detections.csv'}"]
    assert main(["evaluate", "--config", str(cfg_path), "--ground-truth", str(d / "real" / "ground_truth.csv"),
                 "--out", str(d / "rep")] + dets) == 0
    got = read_csv(d / "rep" / "report.csv")
    assert [r["label"] for r in got] == [r["label"] for r in rows]
    for g, r in zip(got, rows):
        assert float(g["sens@10FP"]) == pytest.approx(r["sens@10FP"], abs=1e-12)
        assert float(g["FP@90%sens"]) == pytest.approx(r["FP@90%sens"], abs=1e-12, nan_ok=True)


def test_p2h_direction(tiny_run, tmp_path):
    cfg, out, _ = tiny_run
    d = ex.cmd_synthesize(cfg, out / "dataset", out / "synthesis" / "synth.pt", "p2h", tmp_path / "p2h")
    recs = read_dataset(d)
    assert recs and all(r.domain == "healthy" and not r.mask.data.any() for r in recs)


def test_cli_errors_exit_nonzero(tmp_path, capsys):
    assert main(["train-synth", "--dataset", str(tmp_path / "missing"), "--out", str(tmp_path / "o")]) == 1
    assert "error" in capsys.readouterr().err
    (tmp_path / "bad.yaml").write_text("nonsense_key: 1\n")
    assert main(["make-phantoms", "--config", str(tmp_path / "bad.yaml"), "--out", str(tmp_path / "o")]) == 1
    with pytest.raises(SystemExit) as exc:
        main(["train-detect", "--arm", "imaginary", "--dataset", "x", "--out", "y"])
    assert exc.value.code != 0
