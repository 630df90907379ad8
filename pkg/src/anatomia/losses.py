"""Differentiable loss terms shared by the prior and the semi-supervised
trainer. All functions take torch tensors: probabilities/logits shaped
(B, C+1, *spatial) and integer labels shaped (B, *spatial).
"""
from __future__ import annotations

import torch
import torch.nn.functional as F

DICE_EPS = 1e-5


def one_hot_tensor(
    labels: torch.Tensor, num_channels: int, dtype: torch.dtype = torch.float32
) -> torch.Tensor:
    """(B, *spatial) int labels -> (B, C+1, *spatial) indicator floats."""
    moved = F.one_hot(labels.long(), num_classes=num_channels)
    dims = (0, labels.dim()) + tuple(range(1, labels.dim()))
    return moved.permute(*dims).to(dtype).contiguous()


def soft_dice_loss(probs: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """1 - mean over classes of 2*sum(pq) / (sum(p^2) + sum(q^2) + eps),
    evaluated per sample and averaged over the batch."""
    spatial = tuple(range(2, probs.dim()))
    inter = (probs * target).sum(dim=spatial)
    denom = probs.pow(2).sum(dim=spatial) + target.pow(2).sum(dim=spatial) + DICE_EPS
    dice = 2.0 * inter / denom
    return 1.0 - dice.mean()


def mse_reconstruction_loss(probs: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean squared error over batch, channels and voxels."""
    return (probs - target).pow(2).mean()


def cross_entropy_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Per-voxel cross entropy averaged over the batch."""
    return F.cross_entropy(logits, labels.long())


def squared_error_field(p_a: torch.Tensor, p_b: torch.Tensor) -> torch.Tensor:
    """Per-voxel channel-summed squared difference: (B, *spatial)."""
    return (p_a - p_b).pow(2).sum(dim=1)
