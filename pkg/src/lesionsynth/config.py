"""Experiment configuration: a YAML file validated against a fixed schema.

Unknown keys are rejected. Every field has a default; the published training
settings (0 / 99.5 percentile clipping, 160x146x32 patches with 50% z overlap,
Adam beta1=0.5, beta2=0.99, lr=1e-4, batch 4, 1:1 real:synthetic mixing) are
the defaults here.
"""
from __future__ import annotations

from pathlib import Path
from typing import Dict, List, Optional, Tuple

import yaml
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .detection.augment import CDAParams
from .detection.classifier import ClassifierConfig
from .detection.frst import FRSTParams
from .mask_sampler import LesionPrior
from .phantom import PhantomConfig
from .synthesis.networks import DiscriminatorConfig, GeneratorConfig
from .synthesis.training import LossWeights, OptimizerConfig
from .volume_io import PatchSpec


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class LesionPriorSchema(_Strict):
    count_range: Tuple[int, int] = (1, 3)
    radius_range_mm: Tuple[float, float] = (1.0, 3.0)
    elongation_prob: float = 0.2
    elongation_ratio_range: Tuple[float, float] = (1.0, 2.0)
    foreground_margin_vox: int = 3

    def build(self) -> LesionPrior:
        return LesionPrior(**self.model_dump())


class PhantomSchema(_Strict):
    shape: Tuple[int, int, int] = (160, 146, 48)
    spacing: Tuple[float, float, float] = (0.98, 0.98, 1.0)
    n_healthy: int = Field(6, ge=0)
    n_pathological: int = Field(12, ge=0)
    tissue_level: float = 0.65
    tissue_texture_scale: float = 2.0
    tissue_texture_std: float = 0.04
    vessel_count: int = Field(3, ge=0)
    vessel_radius_range: Tuple[float, float] = (0.8, 1.3)
    vessel_contrast: float = 0.55
    lesion_contrast: float = Field(0.45, gt=0.0, le=1.0)

    def build(self, prior: LesionPrior, seed: int) -> PhantomConfig:
        d = self.model_dump(exclude={"n_healthy", "n_pathological"})
        return PhantomConfig(lesion_prior=prior, seed=seed, **d)


class DataSchema(_Strict):
    dataset_dir: Optional[str] = None
    phantom: PhantomSchema = PhantomSchema()
    n_test: int = Field(4, ge=1)
    normalize: bool = True
    low_pct: float = 0.0
    high_pct: float = 99.5

    @model_validator(mode="after")
    def _pct(self):
        if not 0.0 <= self.low_pct < self.high_pct <= 100.0:
            raise ValueError("need 0 <= low_pct < high_pct <= 100")
        return self


class PatchSchema(_Strict):
    patch_shape: Tuple[int, int, int] = (160, 146, 32)
    z_overlap_fraction: float = Field(0.5, ge=0.0, lt=1.0)

    def build(self) -> PatchSpec:
        return PatchSpec(tuple(self.patch_shape), self.z_overlap_fraction)


class GeneratorSchema(_Strict):
    base_channels: int = Field(16, ge=1)
    num_downsamples: int = Field(2, ge=1)
    num_resblocks: int = Field(3, ge=1)
    head_init_std: float = 1e-3


class DiscriminatorSchema(_Strict):
    base_channels: int = Field(16, ge=1)
    num_layers: int = Field(3, ge=1)


class LossWeightsSchema(_Strict):
    lambda_cc: float = Field(10.0, ge=0)
    lambda_id: float = Field(5.0, ge=0)
    lambda_am: float = Field(10.0, ge=0)
    lambda_gp: float = Field(10.0, ge=0)
    critic_steps_per_gen_step: int = Field(5, ge=1)


class OptimizerSchema(_Strict):
    lr: float = Field(1e-4, gt=0)
    beta1: float = 0.5
    beta2: float = 0.99
    batch_size: int = Field(4, ge=1)


class SynthesisSchema(_Strict):
    generator: GeneratorSchema = GeneratorSchema()
    discriminator: DiscriminatorSchema = DiscriminatorSchema()
    loss_weights: LossWeightsSchema = LossWeightsSchema()
    optimizer: OptimizerSchema = OptimizerSchema()
    steps: int = Field(1000, ge=0)
    synthetic_per_healthy: int = Field(2, ge=1)

    def build(self):
        return (GeneratorConfig(**self.generator.model_dump()),
                DiscriminatorConfig(**self.discriminator.model_dump()),
                LossWeights(**self.loss_weights.model_dump()),
                OptimizerConfig(**self.optimizer.model_dump()))


class FRSTSchema(_Strict):
    radii_vox: List[int] = [2, 3, 4, 5]
    alpha: float = Field(2.0, gt=0)
    gradient_threshold_fraction: float = Field(0.0, ge=0.0, lt=1.0)
    smoothing: float = Field(0.25, gt=0)
    kn: Optional[Dict[int, float]] = None

    def build(self) -> FRSTParams:
        return FRSTParams(tuple(self.radii_vox), self.alpha, self.gradient_threshold_fraction,
                          self.smoothing, self.kn)


class CDASchema(_Strict):
    flip_prob: float = 0.5
    max_rotation_deg: float = 15.0
    scale_range: Tuple[float, float] = (0.9, 1.1)
    max_shear: float = 0.1
    intensity_scale_range: Tuple[float, float] = (0.9, 1.1)
    intensity_shift_range: Tuple[float, float] = (-0.05, 0.05)


class ClassifierSchema(_Strict):
    patch_radius: int = Field(8, ge=1)
    channels: Tuple[int, int, int, int] = (8, 16, 32, 32)
    steps: int = Field(300, ge=0)
    batch_size: int = Field(32, ge=2)
    lr: float = Field(1e-3, gt=0)
    synthetic_to_real_ratio: float = Field(1.0, gt=0)
    cda: CDASchema = CDASchema()
    candidate_threshold_fraction: float = Field(0.05, ge=0.0, lt=1.0)
    min_separation_vox: float = Field(3.0, ge=0)
    max_candidates: int = Field(300, ge=1)
    max_negatives_per_volume: int = Field(40, ge=1)

    def build(self, cda_enabled: bool = False) -> ClassifierConfig:
        d = self.model_dump(exclude={"cda", "max_negatives_per_volume"})
        return ClassifierConfig(cda_enabled=cda_enabled, cda=CDAParams(**self.cda.model_dump()), **d)


class EvaluationSchema(_Strict):
    hit_radius_mm: float = Field(5.0, gt=0)
    n_boot: int = Field(1000, ge=1)
    level: float = Field(0.95, gt=0, lt=1)
    fp_rate: float = Field(10.0, ge=0)
    sensitivity: float = Field(0.9, ge=0, le=1)


class ExperimentConfig(_Strict):
    seed: int = 0
    data: DataSchema = DataSchema()
    patch: PatchSchema = PatchSchema()
    lesion_prior: LesionPriorSchema = LesionPriorSchema()
    synthesis: SynthesisSchema = SynthesisSchema()
    frst: FRSTSchema = FRSTSchema()
    classifier: ClassifierSchema = ClassifierSchema()
    evaluation: EvaluationSchema = EvaluationSchema()


def load_config(path=None, seed: Optional[int] = None) -> ExperimentConfig:
    raw = {}
    if path is not None:
        raw = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(raw, dict):
            raise ValueError(f"{path}: top level must be a mapping")
    cfg = ExperimentConfig.model_validate(raw)
    if seed is not None:
        cfg = cfg.model_copy(update={"seed": seed})
    return cfg


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=False)


def write_config(cfg: ExperimentConfig, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_config(cfg))
