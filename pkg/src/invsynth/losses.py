"""Inversion objective: cross-entropy + BN statistics matching + image priors."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .classifier_zoo import (BnRunningStats, ClassifierHandle, LayerBatchStats,
                             bn_running_stats, forward_with_taps)


@dataclass(frozen=True)
class LossWeights:
    bn: float = 10.0
    tv: float = 6.0e-3
    l2: float = 1.5e-5

    def __post_init__(self):
        for name in ("bn", "tv", "l2"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {name} must be finite and >= 0, got {v}")


@dataclass
class LossReport:
    """All terms from one forward pass. Fields are 0-d tensors; ``total`` carries the graph."""

    total: torch.Tensor
    ce: torch.Tensor
    r_bn: torch.Tensor
    r_tv: torch.Tensor
    r_l2: torch.Tensor

    FIELDS = ("total", "ce", "r_bn", "r_tv", "r_l2")

    def as_row(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in self.FIELDS}


def inception_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Batch-mean cross-entropy of the teacher's prediction against the target labels."""
    targets = torch.as_tensor(targets, dtype=torch.long)
    if targets.numel() and (int(targets.max()) >= logits.shape[1] or int(targets.min()) < 0):
        raise ValueError(f"target index out of range for {logits.shape[1]} classes")
    return F.cross_entropy(logits, targets)


def bn_regularizer(stats: LayerBatchStats, running: BnRunningStats) -> torch.Tensor:
    """Sum over BN layers of ||mean - running_mean||_2 + ||var - running_var||_2."""
    if len(stats.means) != len(running.means) or len(stats.variances) != len(running.variances):
        raise ValueError(f"{len(stats.means)} batch-stat layers vs {len(running.means)} BN layers")
    total = None
    for mu, var, rmu, rvar in zip(stats.means, stats.variances, running.means, running.variances):
        term = (torch.linalg.vector_norm(mu - rmu.to(mu.dtype))
                + torch.linalg.vector_norm(var - rvar.to(var.dtype)))
        total = term if total is None else total + term
    if total is None:
        return torch.zeros(())
    return total


def tv_loss(images: torch.Tensor) -> torch.Tensor:
    """Squared anisotropic total variation, summed per image and averaged over the batch."""
    if images.shape[-1] < 2 and images.shape[-2] < 2:
        warnings.warn("tv_loss on images smaller than 2 pixels in both axes is 0", stacklevel=2)
        return images.new_zeros(())
    dh = images[..., :, 1:] - images[..., :, :-1]
    dv = images[..., 1:, :] - images[..., :-1, :]
    per_image = dh.pow(2).flatten(1).sum(1) + dv.pow(2).flatten(1).sum(1)
    return per_image.mean()


def l2_prior(images: torch.Tensor) -> torch.Tensor:
    """Per-image Euclidean norm over all entries, averaged over the batch."""
    return torch.linalg.vector_norm(images.flatten(1), dim=1).mean()


def total_inversion_loss(images: torch.Tensor, targets: torch.Tensor,
                         teacher: ClassifierHandle, weights: LossWeights,
                         running: BnRunningStats | None = None) -> LossReport:
    out = forward_with_taps(teacher, images)
    running = running if running is not None else bn_running_stats(teacher)
    ce = inception_loss(out.logits, targets)
    r_bn = bn_regularizer(out.stats, running)
    r_tv = tv_loss(images)
    r_l2 = l2_prior(images)
    total = ce + weights.bn * r_bn + weights.tv * r_tv + weights.l2 * r_l2
    return LossReport(total, ce, r_bn, r_tv, r_l2)
