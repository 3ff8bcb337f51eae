"""Training losses for the rating network.

All functions accept batched torch tensors and average over the batch.
Levels are 1-based throughout (1 = best grade).
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F

EPS = 1e-12
LOG_EPS = math.log(EPS)


def loss1(probs: torch.Tensor, truth: torch.Tensor) -> torch.Tensor:
    """Pixel-averaged cross entropy on class probabilities ``(N, 2, H, W)`` or ``(2, H, W)``.

    Probabilities are clamped below at 1e-12 before the log.
    """
    if probs.dim() == 3:
        probs, truth = probs[None], truth[None]
    if probs.shape[0] != truth.shape[0] or probs.shape[2:] != truth.shape[1:]:
        raise ValueError(f"shape mismatch: {tuple(probs.shape)} vs {tuple(truth.shape)}")
    p_true = probs.gather(1, truth.long()[:, None]).squeeze(1)
    return -torch.log(p_true.clamp_min(EPS)).mean()


def loss1_from_logits(logits: torch.Tensor, truth: torch.Tensor) -> torch.Tensor:
    """Same value as ``loss1(softmax(logits), truth)``, computed in log space."""
    logp = F.log_softmax(logits, dim=1).clamp_min(LOG_EPS)
    return -logp.gather(1, truth.long()[:, None]).mean()


def loss2(pred_area: torch.Tensor, true_area: torch.Tensor) -> torch.Tensor:
    """Mean absolute error over the ``n`` per-image area purities."""
    if pred_area.shape != true_area.shape:
        raise ValueError(f"length mismatch: {tuple(pred_area.shape)} vs {tuple(true_area.shape)}")
    return (pred_area - true_area).abs().mean()


def focal_loss(level_logits: torch.Tensor, true_level: torch.Tensor, gamma: float = 2.0) -> torch.Tensor:
    """-(1 - p_t)^gamma * log(p_t) with ``p_t`` the softmax probability of the true level."""
    if level_logits.dim() == 1:
        level_logits = level_logits[None]
    true_level = torch.as_tensor(true_level, device=level_logits.device).reshape(-1).long()
    L = level_logits.shape[-1]
    if ((true_level < 1) | (true_level > L)).any():
        raise ValueError(f"true level must lie in [1, {L}]")
    logp = F.log_softmax(level_logits, dim=-1).gather(-1, (true_level - 1)[:, None]).squeeze(-1)
    p_t = logp.exp()
    if gamma == 0:
        return (-logp).mean()
    return (-(1.0 - p_t).pow(gamma) * logp).mean()


def loss3(mass_pred: torch.Tensor, level_logits: torch.Tensor, true_mass: torch.Tensor,
          true_level: torch.Tensor, alpha: float = 0.5, gamma: float = 2.0) -> torch.Tensor:
    """alpha * |mass error| + (1 - alpha) * focal loss, each averaged over the batch."""
    mass_pred = mass_pred.reshape(-1)
    true_mass = torch.as_tensor(true_mass, dtype=mass_pred.dtype).reshape(-1)
    l1 = (mass_pred - true_mass).abs().mean()
    if alpha == 1.0:
        return l1
    fl = focal_loss(level_logits, true_level, gamma)
    if alpha == 0.0:
        return fl
    return alpha * l1 + (1.0 - alpha) * fl
