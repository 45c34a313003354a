"""Masked soft-Dice and cross-entropy, plus a finite-difference gradient check.

Masks select the voxels that contribute; everything is computed on the
selected sub-tensor so a masked loss equals the unmasked loss on the kept
voxels. An empty selection contributes 0.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

DICE_EPS = 1e-5


def _flatten(logits, target, mask):
    # (B, C, ...) -> (C, N) logits, (N,) target
    c = logits.shape[1]
    flat = logits.movedim(1, -1).reshape(-1, c)
    tgt = target.reshape(-1).long()
    if mask is not None:
        keep = mask.reshape(-1).bool()
        flat, tgt = flat[keep], tgt[keep]
    return flat, tgt


def masked_cross_entropy(logits, target, mask=None):
    flat, tgt = _flatten(logits, target, mask)
    if tgt.numel() == 0:
        return logits.sum() * 0.0
    return F.cross_entropy(flat, tgt)


def soft_dice_loss(logits, target, mask=None, eps=DICE_EPS):
    """1 - mean over classes of (2*sum(p*t) + eps) / (sum(p) + sum(t) + eps)."""
    flat, tgt = _flatten(logits, target, mask)
    c = logits.shape[1]
    if tgt.numel() == 0:
        return logits.sum() * 0.0
    probs = torch.softmax(flat, dim=1)
    onehot = F.one_hot(tgt, c).to(probs.dtype)
    inter = (probs * onehot).sum(0)
    denom = probs.sum(0) + onehot.sum(0)
    dice = (2.0 * inter + eps) / (denom + eps)
    return 1.0 - dice.mean()


def dice_ce_loss(logits, target, mask=None, w_dice=1.0, w_ce=1.0):
    return w_dice * soft_dice_loss(logits, target, mask) + w_ce * masked_cross_entropy(logits, target, mask)


def _central_difference(fn, x: torch.Tensor, step: float) -> torch.Tensor:
    grad = torch.zeros_like(x)
    flat, gflat = x.view(-1), grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + step
        hi = fn(x).item()
        flat[i] = orig - step
        lo = fn(x).item()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad


def max_relative_error(analytic: torch.Tensor, numeric: torch.Tensor, floor=1e-6) -> float:
    a, n = analytic.detach().double(), numeric.detach().double()
    denom = torch.clamp(torch.maximum(a.abs(), n.abs()), min=floor)
    return float(((a - n).abs() / denom).max())


def gradcheck_losses(rng_seed: int = 0, shape=(1, 3, 4, 4, 2), step=1e-4, tol=1e-3) -> dict:
    """Compare autograd gradients of both losses (w.r.t. logits) against
    central differences on a tiny random problem, in float64.

    Returns a report with the max relative error per loss and a pass flag.
    """
    gen = torch.Generator().manual_seed(int(rng_seed))
    logits = torch.randn(shape, generator=gen, dtype=torch.float64)
    spatial = (shape[0],) + tuple(shape[2:])
    target = torch.randint(0, shape[1], spatial, generator=gen)
    mask = torch.rand(spatial, generator=gen) > 0.3
    if not mask.any():
        mask.view(-1)[0] = True

    cases = {
        "soft_dice": lambda x: soft_dice_loss(x, target),
        "soft_dice_masked": lambda x: soft_dice_loss(x, target, mask),
        "cross_entropy_masked": lambda x: masked_cross_entropy(x, target, mask),
    }
    errors = {}
    for name, fn in cases.items():
        x = logits.clone().requires_grad_(True)
        (analytic,) = torch.autograd.grad(fn(x), x)
        numeric = _central_difference(fn, logits.clone(), step)
        errors[name] = max_relative_error(analytic, numeric)
    return {
        "seed": int(rng_seed),
        "step": step,
        "tolerance": tol,
        "max_relative_error": errors,
        "passed": all(np.isfinite(e) and e <= tol for e in errors.values()),
    }
