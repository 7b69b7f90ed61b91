"""3D generator and Wasserstein critic.

Generators take ``(image, mask)`` concatenated on the channel axis and predict
a logit-space correction to the input image, so an untrained generator (head
weights near zero) reproduces its input. Critics see the image only and end
without a sigmoid.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

LOGIT_EPS = 1e-3


@dataclass(frozen=True)
class GeneratorConfig:
    base_channels: int = 16
    num_downsamples: int = 2
    num_resblocks: int = 3
    in_channels: int = 2
    out_channels: int = 1
    head_init_std: float = 1e-3

    def __post_init__(self):
        for name in ("base_channels", "num_downsamples", "num_resblocks"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.in_channels != 2 or self.out_channels != 1:
            raise ValueError("generators map image+mask (2 channels) to one image channel")

    def receptive_field(self) -> int:
        rf, jump = 3, 1  # stem conv
        for _ in range(self.num_downsamples):
            rf += 2 * jump
            jump *= 2
        rf += self.num_resblocks * 2 * 2 * jump
        return rf


@dataclass(frozen=True)
class DiscriminatorConfig:
    base_channels: int = 16
    num_layers: int = 3

    def __post_init__(self):
        if self.base_channels < 1 or self.num_layers < 1:
            raise ValueError("critic counts must be >= 1")


class ResBlock3d(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv3d(ch, ch, 3, padding=1),
            nn.InstanceNorm3d(ch, affine=True),
            nn.ReLU(inplace=True),
            nn.Conv3d(ch, ch, 3, padding=1),
            nn.InstanceNorm3d(ch, affine=True),
        )

    def forward(self, x):
        return x + self.body(x)


class Generator(nn.Module):
    def __init__(self, cfg: GeneratorConfig = GeneratorConfig()):
        super().__init__()
        self.cfg = cfg
        c = cfg.base_channels
        self.stem = nn.Sequential(nn.Conv3d(cfg.in_channels, c, 3, padding=1),
                                  nn.InstanceNorm3d(c, affine=True), nn.ReLU(inplace=True))
        self.down = nn.ModuleList()
        for _ in range(cfg.num_downsamples):
            self.down.append(nn.Sequential(nn.Conv3d(c, 2 * c, 3, stride=2, padding=1),
                                           nn.InstanceNorm3d(2 * c, affine=True), nn.ReLU(inplace=True)))
            c *= 2
        self.res = nn.Sequential(*[ResBlock3d(c) for _ in range(cfg.num_resblocks)])
        self.up = nn.ModuleList()
        self.up_norm = nn.ModuleList()
        for _ in range(cfg.num_downsamples):
            self.up.append(nn.ConvTranspose3d(c, c // 2, 3, stride=2, padding=1))
            self.up_norm.append(nn.Sequential(nn.InstanceNorm3d(c // 2, affine=True), nn.ReLU(inplace=True)))
            c //= 2
        self.head = nn.Conv3d(c, cfg.out_channels, 3, padding=1)
        nn.init.normal_(self.head.weight, std=cfg.head_init_std)
        nn.init.zeros_(self.head.bias)

    def forward(self, image, mask):
        if image.shape != mask.shape:
            raise ValueError(f"image shape {tuple(image.shape)} != mask shape {tuple(mask.shape)}")
        h = self.stem(torch.cat([image, mask.to(image.dtype)], dim=1))
        sizes = []
        for layer in self.down:
            sizes.append(h.shape[2:])
            h = layer(h)
        h = self.res(h)
        for up, norm, size in zip(self.up, self.up_norm, reversed(sizes)):
            h = norm(up(h, output_size=size))
        delta = self.head(h)
        base = torch.logit(image.clamp(LOGIT_EPS, 1 - LOGIT_EPS))
        return torch.sigmoid(base + delta)


class Critic(nn.Module):
    """Patch critic without normalisation layers; ``forward`` returns one score per sample."""

    def __init__(self, cfg: DiscriminatorConfig = DiscriminatorConfig()):
        super().__init__()
        self.cfg = cfg
        layers, c_in, c = [], 1, cfg.base_channels
        for _ in range(cfg.num_layers):
            layers += [nn.Conv3d(c_in, c, 3, stride=2, padding=1), nn.LeakyReLU(0.2)]
            c_in, c = c, c * 2
        layers.append(nn.Conv3d(c_in, 1, 3, padding=1))
        self.net = nn.Sequential(*layers)

    def critic_map(self, x):
        return self.net(x)

    def forward(self, x):
        return self.net(x).flatten(1).mean(1)
