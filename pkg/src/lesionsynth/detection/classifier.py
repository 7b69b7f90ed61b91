"""Small 3D CNN that scores candidate-centred cubes as lesion / non-lesion."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np
import torch
from torch import nn

from .augment import CDAParams, apply_cda

CHECKPOINT_FORMAT = "lesionsynth.classifier/1"


@dataclass(frozen=True)
class ClassifierConfig:
    patch_radius: int = 8
    channels: Tuple[int, ...] = (8, 16, 32, 32)
    steps: int = 300
    batch_size: int = 32
    lr: float = 1e-3
    synthetic_to_real_ratio: float = 1.0
    cda_enabled: bool = False
    cda: CDAParams = field(default_factory=CDAParams)
    candidate_threshold_fraction: float = 0.05
    min_separation_vox: float = 3.0
    max_candidates: int = 300

    def __post_init__(self):
        if self.patch_radius < 1:
            raise ValueError("patch_radius must be >= 1")
        if len(self.channels) != 4 or any(c < 1 for c in self.channels):
            raise ValueError("channels must list four positive widths")
        if self.batch_size < 2 or self.steps < 0 or self.lr <= 0:
            raise ValueError("invalid classifier training hyperparameters")


class PatchClassifier(nn.Module):
    """Four conv blocks, global average pooling and a linear head (one logit)."""

    def __init__(self, cfg: ClassifierConfig = ClassifierConfig()):
        super().__init__()
        self.cfg = cfg
        layers, c_in = [], 1
        for i, c in enumerate(cfg.channels):
            stride = 1 if i == 0 else 2
            layers += [nn.Conv3d(c_in, c, 3, stride=stride, padding=1), nn.BatchNorm3d(c), nn.ReLU(inplace=True)]
            c_in = c
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(c_in, 1)

    def forward(self, x):
        h = self.features(x).mean(dim=(2, 3, 4))
        return self.head(h).squeeze(1)

    @torch.no_grad()
    def predict_proba(self, patches) -> np.ndarray:
        if len(patches) == 0:
            return np.zeros(0)
        self.eval()
        x = torch.from_numpy(np.stack(patches).astype(np.float32))[:, None]
        out = []
        for chunk in torch.split(x, 256):
            out.append(torch.sigmoid(self(chunk)))
        return torch.cat(out).double().numpy()


def _augment(batch: np.ndarray, cfg: ClassifierConfig, rng: np.random.Generator) -> np.ndarray:
    return np.stack([apply_cda(p, None, rng, cfg.cda)[0] for p in batch])


def train_classifier(positives: Sequence[np.ndarray], negatives: Sequence[np.ndarray],
                     cfg: ClassifierConfig, rng: np.random.Generator):
    """Binary cross-entropy training with class-balanced batches.

    Returns ``(model, history)`` where history holds ``(step, loss)`` pairs.
    """
    if len(positives) == 0 or len(negatives) == 0:
        raise ValueError("train_classifier needs at least one positive and one negative patch")
    torch.manual_seed(int(rng.integers(2 ** 31)))
    model = PatchClassifier(cfg)
    pos = np.stack(positives).astype(np.float32)
    neg = np.stack(negatives).astype(np.float32)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    loss_fn = nn.BCEWithLogitsLoss()
    half = cfg.batch_size // 2
    labels = torch.cat([torch.ones(half), torch.zeros(half)])
    history: List[Tuple[int, float]] = []
    model.train()
    for step in range(cfg.steps):
        batch = np.concatenate([pos[rng.integers(len(pos), size=half)],
                                neg[rng.integers(len(neg), size=half)]])
        if cfg.cda_enabled:
            batch = _augment(batch, cfg, rng)
        logits = model(torch.from_numpy(batch)[:, None])
        loss = loss_fn(logits, labels)
        if not torch.isfinite(loss):
            raise FloatingPointError(f"non-finite classifier loss at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        history.append((step, float(loss.detach())))
    model.eval()
    return model, history


def save_classifier(model: PatchClassifier, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cfg = asdict(model.cfg)
    torch.save({"format": CHECKPOINT_FORMAT, "config": cfg, "state": model.state_dict()}, path)


def load_classifier(path) -> PatchClassifier:
    state = torch.load(path, map_location="cpu", weights_only=False)
    if state.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"not a classifier checkpoint (format={state.get('format')!r})")
    cfg = dict(state["config"])
    cfg["channels"] = tuple(cfg["channels"])
    cfg["cda"] = CDAParams(**{k: tuple(v) if isinstance(v, list) else v for k, v in cfg["cda"].items()})
    model = PatchClassifier(ClassifierConfig(**cfg))
    model.load_state_dict(state["state"])
    model.eval()
    return model
