"""Loss terms of the dual-cycle objective.

Tensors are ``(batch, channel, x, y, z)``. Critics may be any callable that
maps a batch to per-sample scores (or score maps, which are averaged).
"""
from __future__ import annotations

import torch


def l1(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).abs().mean()


def cycle_loss(x, x_recon):
    return l1(x, x_recon)


def identity_loss(x_h, g_ph_out):
    """``g_ph_out`` is G_PH applied to ``x_h`` with an empty mask."""
    return l1(x_h, g_ph_out)


def abnormality_mask_loss(x_p, x_tilde_h, y_p):
    """Mean absolute difference restricted to voxels outside the pathology mask."""
    if not (x_p.shape == x_tilde_h.shape == y_p.shape):
        raise ValueError(f"shape mismatch: {tuple(x_p.shape)}, {tuple(x_tilde_h.shape)}, {tuple(y_p.shape)}")
    outside = (y_p == 0).to(x_p.dtype)
    n = outside.sum()
    if n == 0:
        return x_p.new_zeros(())
    return ((x_p - x_tilde_h).abs() * outside).sum() / n


def critic_scores(D, x):
    out = D(x)
    if out.dim() > 1:
        out = out.flatten(1).mean(1)
    return out


def gradient_penalty(D, real, fake, generator=None):
    """Mean over the batch of (||grad D(x_hat)||_2 - 1)^2 at random interpolates."""
    if real.shape != fake.shape:
        raise ValueError(f"shape mismatch: {tuple(real.shape)} vs {tuple(fake.shape)}")
    eps_shape = (real.shape[0],) + (1,) * (real.dim() - 1)
    eps = torch.rand(eps_shape, generator=generator, dtype=real.dtype, device=real.device)
    # the penalty needs an input gradient even when called under no_grad
    outer_grad = torch.is_grad_enabled()
    with torch.enable_grad():
        x_hat = (eps * real.detach() + (1 - eps) * fake.detach()).requires_grad_(True)
        scores = critic_scores(D, x_hat)
        grad = None
        if scores.requires_grad:
            (grad,) = torch.autograd.grad(scores.sum(), x_hat, create_graph=outer_grad, allow_unused=True)
    if grad is None:  # critic independent of its input
        grad = torch.zeros_like(x_hat)
    norm = torch.linalg.vector_norm(grad.flatten(1), dim=1)
    return ((norm - 1) ** 2).mean()


def wasserstein_term(D, real, fake):
    return critic_scores(D, fake).mean() - critic_scores(D, real).mean()


def critic_loss(D, real, fake, lambda_gp=10.0, generator=None):
    return wasserstein_term(D, real, fake) + lambda_gp * gradient_penalty(D, real, fake, generator)


def gen_adv_loss(D, fake):
    return -critic_scores(D, fake).mean()
