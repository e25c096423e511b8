"""Conditional per-batch generator G(z|y).

A fresh generator is built for every batch of synthesized images and thrown
away afterwards; only its seed identifies it.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .classifier_zoo import ShapeError

LATENT_DIM = 1024
LABEL_POLICIES = ("balanced", "random")


@dataclass
class LatentBatch:
    z: torch.Tensor
    y: torch.Tensor  # one-hot, batch x C

    @property
    def labels(self) -> torch.Tensor:
        return self.y.argmax(dim=1)

    def inputs(self) -> torch.Tensor:
        return torch.cat([self.z, self.y.to(self.z.dtype)], dim=1)

    def to(self, dtype) -> "LatentBatch":
        return LatentBatch(self.z.to(dtype), self.y.to(dtype))


class Generator(nn.Module):
    """linear -> (BN, LReLU, up) -> (conv, BN, LReLU, up) -> (conv, BN, LReLU) -> conv.

    ``widths`` are the channel counts after the linear layer, block 2 and
    block 3; the reference sizes are (128, 128, 64). The linear layer emits a
    ``resolution/4`` square map so two x2 upsamplings land on ``resolution``.
    """

    def __init__(self, num_classes: int, resolution: int = 32, latent_dim: int = LATENT_DIM,
                 widths=(128, 128, 64), seed: int = 0):
        super().__init__()
        if num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if resolution % 4:
            raise ValueError("resolution must be divisible by 4")
        w0, w1, w2 = widths
        self.num_classes = num_classes
        self.latent_dim = latent_dim
        self.resolution = resolution
        self.widths = tuple(widths)
        self.seed = seed
        self.base = resolution // 4
        self.linear = nn.Linear(latent_dim + num_classes, w0 * self.base * self.base)
        self.bn1 = nn.BatchNorm2d(w0)
        self.conv2 = nn.Conv2d(w0, w1, 3, 1, 1)
        self.bn2 = nn.BatchNorm2d(w1)
        self.conv3 = nn.Conv2d(w1, w2, 3, 1, 1)
        self.bn3 = nn.BatchNorm2d(w2)
        self.out = nn.Conv2d(w2, 3, 3, 1, 1)
        self._init_weights()

    def _init_weights(self):
        for m in self.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                nn.init.kaiming_normal_(m.weight, a=0.2, mode="fan_in", nonlinearity="leaky_relu")
                nn.init.zeros_(m.bias)

    @property
    def input_dim(self) -> int:
        return self.linear.in_features

    def forward(self, latent: LatentBatch) -> torch.Tensor:
        x = latent.inputs()
        if x.shape[1] != self.input_dim:
            raise ShapeError(f"latent width {x.shape[1]} != generator input {self.input_dim}")
        h = self.linear(x).view(x.shape[0], -1, self.base, self.base)
        h = F.interpolate(F.leaky_relu(self.bn1(h), 0.2), scale_factor=2, mode="nearest")
        h = F.interpolate(F.leaky_relu(self.bn2(self.conv2(h)), 0.2), scale_factor=2, mode="nearest")
        h = F.leaky_relu(self.bn3(self.conv3(h)), 0.2)
        return self.out(h)


def init_generator(num_classes: int, seed: int, resolution: int = 32,
                   latent_dim: int = LATENT_DIM, widths=(128, 128, 64)) -> Generator:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        g = Generator(num_classes, resolution, latent_dim, widths, seed)
    g.train()
    return g


def reinitialize(state: Generator, new_seed: int) -> Generator:
    """Fresh draw with the same architecture; ``state`` is left as it was."""
    return init_generator(state.num_classes, new_seed, state.resolution, state.latent_dim, state.widths)


def generate(state: Generator, latent: LatentBatch) -> torch.Tensor:
    return state(latent)


def assign_labels(batch_size: int, num_classes: int, policy: str = "balanced",
                  rng: np.random.Generator | None = None) -> np.ndarray:
    if policy == "balanced":
        return np.arange(batch_size) % num_classes
    if policy == "random":
        rng = rng if rng is not None else np.random.default_rng()
        return rng.integers(0, num_classes, size=batch_size)
    raise ValueError(f"unknown label policy {policy!r}; expected one of {LABEL_POLICIES}")


def sample_latent(batch_size: int, num_classes: int, label_policy: str = "balanced",
                  seed: int = 0, latent_dim: int = LATENT_DIM) -> LatentBatch:
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    gen = torch.Generator().manual_seed(seed)
    z = torch.randn(batch_size, latent_dim, generator=gen)
    labels = assign_labels(batch_size, num_classes, label_policy, np.random.default_rng(seed))
    y = F.one_hot(torch.as_tensor(labels, dtype=torch.long), num_classes).float()
    return LatentBatch(z, y)


def clone(state: Generator) -> Generator:
    return copy.deepcopy(state)
