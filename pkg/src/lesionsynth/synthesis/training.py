"""SynthModel container, the two cycle steps, the adversarial training loop,
checkpointing and whole-volume synthesis."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import torch
from scipy import ndimage

from ..mask_sampler import LesionPrior, PlacementError, sample_pathology_mask
from ..volume_io import PathologyMask, PatchSpec, Volume, extract_patches, stitch_patches
from .losses import (abnormality_mask_loss, cycle_loss, gen_adv_loss, gradient_penalty,
                     identity_loss, wasserstein_term)
from .networks import Critic, DiscriminatorConfig, Generator, GeneratorConfig

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "lesionsynth.synth/1"


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class LossWeights:
    lambda_cc: float = 10.0
    lambda_id: float = 5.0
    lambda_am: float = 10.0
    lambda_gp: float = 10.0
    critic_steps_per_gen_step: int = 5

    def __post_init__(self):
        for name in ("lambda_cc", "lambda_id", "lambda_am", "lambda_gp"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0")
        if self.critic_steps_per_gen_step < 1:
            raise ValueError("critic_steps_per_gen_step must be >= 1")


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.99
    batch_size: int = 4


class SynthModel:
    """The four networks (G_HP, G_PH, D_P, D_H), loss weights and Adam state."""

    def __init__(self, gen_cfg=GeneratorConfig(), disc_cfg=DiscriminatorConfig(),
                 weights=LossWeights(), optim=OptimizerConfig(), seed: int = 0):
        self.gen_cfg = gen_cfg
        self.disc_cfg = disc_cfg
        self.weights = weights
        self.optim = optim
        self.seed = seed
        torch.manual_seed(seed)
        self.g_hp = Generator(gen_cfg)
        self.g_ph = Generator(gen_cfg)
        self.d_p = Critic(disc_cfg)
        self.d_h = Critic(disc_cfg)
        betas = (optim.beta1, optim.beta2)
        self.opt_g = torch.optim.Adam(list(self.g_hp.parameters()) + list(self.g_ph.parameters()),
                                      lr=optim.lr, betas=betas)
        self.opt_d = torch.optim.Adam(list(self.d_p.parameters()) + list(self.d_h.parameters()),
                                      lr=optim.lr, betas=betas)
        self.steps_done = 0

    def networks(self):
        return {"g_hp": self.g_hp, "g_ph": self.g_ph, "d_p": self.d_p, "d_h": self.d_h}

    def to(self, dtype):
        for net in self.networks().values():
            net.to(dtype)
        return self

    def state_dict(self):
        return {
            "format": CHECKPOINT_FORMAT,
            "generator_config": asdict(self.gen_cfg),
            "discriminator_config": asdict(self.disc_cfg),
            "loss_weights": asdict(self.weights),
            "optimizer_config": asdict(self.optim),
            "seed": self.seed,
            "steps_done": self.steps_done,
            "networks": {k: v.state_dict() for k, v in self.networks().items()},
            "opt_g": self.opt_g.state_dict(),
            "opt_d": self.opt_d.state_dict(),
        }

    @classmethod
    def from_state_dict(cls, state):
        if state.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"not a synthesis checkpoint (format={state.get('format')!r})")
        model = cls(GeneratorConfig(**state["generator_config"]),
                    DiscriminatorConfig(**state["discriminator_config"]),
                    LossWeights(**state["loss_weights"]),
                    OptimizerConfig(**state["optimizer_config"]),
                    seed=state["seed"])
        for k, net in model.networks().items():
            net.load_state_dict(state["networks"][k])
        model.opt_g.load_state_dict(state["opt_g"])
        model.opt_d.load_state_dict(state["opt_d"])
        model.steps_done = state["steps_done"]
        return model


def save_checkpoint(model: SynthModel, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), path)


def load_checkpoint(path) -> SynthModel:
    return SynthModel.from_state_dict(torch.load(path, map_location="cpu", weights_only=False))


# ------------------------------------------------------------------ cycle steps


def hph_step(model: SynthModel, x_h, y_p):
    """Healthy -> pathological -> healthy. Returns weighted terms and their total."""
    w = model.weights
    x_tilde_p = model.g_hp(x_h, y_p)
    recon = model.g_ph(x_tilde_p, y_p)
    same = model.g_ph(x_h, torch.zeros_like(y_p))
    terms = {
        "hph_cycle": w.lambda_cc * cycle_loss(x_h, recon),
        "hph_identity": w.lambda_id * identity_loss(x_h, same),
        "hph_adv": gen_adv_loss(model.d_p, x_tilde_p),
    }
    terms["hph_total"] = sum(terms.values())
    return terms


def php_step(model: SynthModel, x_p, y_p):
    """Pathological -> healthy -> pathological, with the abnormality-mask term."""
    w = model.weights
    x_tilde_h = model.g_ph(x_p, y_p)
    recon = model.g_hp(x_tilde_h, y_p)
    terms = {
        "php_cycle": w.lambda_cc * cycle_loss(x_p, recon),
        "php_abnormality": w.lambda_am * abnormality_mask_loss(x_p, x_tilde_h, y_p),
        "php_adv": gen_adv_loss(model.d_h, x_tilde_h),
    }
    terms["php_total"] = sum(terms.values())
    return terms


# ------------------------------------------------------------------ data pools


def foreground_of(image: np.ndarray, level: float = 0.02) -> np.ndarray:
    """Tissue support of a normalised image: thresholded, holes filled slice by slice."""
    fg = image > level
    for k in range(fg.shape[2]):
        fg[:, :, k] = ndimage.binary_fill_holes(fg[:, :, k])
    return fg


@dataclass
class PatchPools:
    """Training patches: healthy images (+ their tissue support) and pathological image/mask pairs."""
    healthy: List[np.ndarray]
    healthy_support: List[np.ndarray]
    pathological: List[np.ndarray]
    pathological_masks: List[np.ndarray]

    @classmethod
    def from_records(cls, records, spec: PatchSpec):
        hv, hs, pv, pm = [], [], [], []
        for rec in records:
            for vol, mask, _ in extract_patches(rec.volume, rec.mask, spec):
                if rec.domain == "healthy":
                    hv.append(vol.data.astype(np.float32))
                    hs.append(foreground_of(vol.data))
                elif mask.data.any():
                    pv.append(vol.data.astype(np.float32))
                    pm.append(mask.data.astype(np.float32))
        return cls(hv, hs, pv, pm)


def _stack(arrays):
    return torch.from_numpy(np.stack(arrays)[:, None].astype(np.float32))


class BatchSampler:
    """Draws (x_h, y_sampled, x_p, y_p) batches; masks for x_h come from the lesion prior."""

    def __init__(self, pools: PatchPools, prior: LesionPrior, spacing, batch_size: int,
                 rng: np.random.Generator):
        if not pools.healthy or not pools.pathological:
            raise ValueError("both healthy and pathological pools must be non-empty")
        self.pools = pools
        self.prior = prior
        self.spacing = spacing
        self.batch_size = batch_size
        self.rng = rng

    def _sampled_mask(self, i):
        try:
            m = sample_pathology_mask(self.pools.healthy_support[i], self.spacing, self.prior, self.rng)
            return m.data.astype(np.float32)
        except PlacementError:
            return np.zeros(self.pools.healthy[i].shape, np.float32)

    def __call__(self):
        hi = self.rng.integers(len(self.pools.healthy), size=self.batch_size)
        pi = self.rng.integers(len(self.pools.pathological), size=self.batch_size)
        x_h = _stack([self.pools.healthy[i] for i in hi])
        y_s = _stack([self._sampled_mask(i) for i in hi])
        x_p = _stack([self.pools.pathological[i] for i in pi])
        y_p = _stack([self.pools.pathological_masks[i] for i in pi])
        return x_h, y_s, x_p, y_p


# --------------------------------------------------------------------- training


def _check_finite(terms: Dict[str, torch.Tensor], step: int):
    for name, value in terms.items():
        if not torch.isfinite(value).all():
            raise TrainingDivergedError(f"non-finite loss term {name!r} at step {step}")


def train(model: SynthModel, sampler: Callable, steps: int, seed: int = 0,
          on_step: Optional[Callable[[int, Dict[str, float]], None]] = None) -> List[Tuple[int, str, float]]:
    """Alternate critic and generator updates for ``steps`` generator steps.

    Returns the loss history as ``(step, term, value)`` rows. Raises
    :class:`TrainingDivergedError` on the first non-finite term.
    """
    history: List[Tuple[int, str, float]] = []
    if steps <= 0:
        return history
    torch.manual_seed(seed)
    gp_gen = torch.Generator().manual_seed(seed)
    w = model.weights
    nets = model.networks()
    for net in nets.values():
        net.train()
    for step in range(model.steps_done, model.steps_done + steps):
        for _ in range(w.critic_steps_per_gen_step):
            x_h, y_s, x_p, y_p = sampler()
            with torch.no_grad():
                fake_p = model.g_hp(x_h, y_s)
                fake_h = model.g_ph(x_p, y_p)
            d_terms = {
                "critic_p_wdist": wasserstein_term(model.d_p, x_p, fake_p),
                "critic_p_gp": gradient_penalty(model.d_p, x_p, fake_p, gp_gen),
                "critic_h_wdist": wasserstein_term(model.d_h, x_h, fake_h),
                "critic_h_gp": gradient_penalty(model.d_h, x_h, fake_h, gp_gen),
            }
            _check_finite(d_terms, step)
            d_total = (d_terms["critic_p_wdist"] + d_terms["critic_h_wdist"]
                       + w.lambda_gp * (d_terms["critic_p_gp"] + d_terms["critic_h_gp"]))
            model.opt_d.zero_grad(set_to_none=True)
            d_total.backward()
            model.opt_d.step()

        x_h, y_s, x_p, y_p = sampler()
        for d in (model.d_p, model.d_h):
            d.requires_grad_(False)
        g_terms = {**hph_step(model, x_h, y_s), **php_step(model, x_p, y_p)}
        _check_finite(g_terms, step)
        model.opt_g.zero_grad(set_to_none=True)
        (g_terms["hph_total"] + g_terms["php_total"]).backward()
        model.opt_g.step()
        for d in (model.d_p, model.d_h):
            d.requires_grad_(True)

        record = {k: float(v.detach()) for k, v in {**d_terms, **g_terms}.items()}
        history.extend((step, k, v) for k, v in record.items())
        if on_step is not None:
            on_step(step, record)
    model.steps_done += steps
    for net in nets.values():
        net.eval()
    return history


def write_history(history, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "term", "value"])
        writer.writerows(history)


# -------------------------------------------------------------------- inference


@torch.no_grad()
def _translate(generator, x: Volume, y: PathologyMask, spec: PatchSpec) -> Volume:
    outs, origins = [], []
    for vol, mask, origin in extract_patches(x, y, spec):
        img = torch.from_numpy(vol.data.astype(np.float32))[None, None]
        msk = torch.from_numpy(mask.data.astype(np.float32))[None, None]
        outs.append(generator(img, msk)[0, 0].numpy())
        origins.append(origin)
    out = stitch_patches(outs, origins, x.shape, x.spacing)
    return Volume(np.clip(out.data, 0.0, 1.0), x.spacing)


def synthesize_pathological(model: SynthModel, x_h: Volume, y_p: PathologyMask, spec: PatchSpec) -> Volume:
    model.g_hp.eval()
    return _translate(model.g_hp, x_h, y_p, spec)


def synthesize_healthy(model: SynthModel, x_p: Volume, y_p: PathologyMask, spec: PatchSpec) -> Volume:
    model.g_ph.eval()
    return _translate(model.g_ph, x_p, y_p, spec)
