"""Procedural grating/blob corpus used as the "real" training data at desk scale.

Each class is a (pattern, palette) pair. Patterns are drawn with random
period, phase, position and size, palettes with random jitter, and every
image gets additive pixel noise, so the classes overlap in low-level
statistics but stay separable for a small CNN. Pixel values are in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

PATTERNS = ("hgrating", "vgrating", "blob", "ring", "dgrating")
PALETTES = ("warm", "cool")
MAX_CLASSES = len(PATTERNS) * len(PALETTES)

PROVENANCE_REAL = "real"
PROVENANCE_SYNTHETIC = "synthetic"


@dataclass
class LabeledImages:
    """Images plus integer labels, tagged with where they came from."""

    images: torch.Tensor
    labels: torch.Tensor
    provenance: str = PROVENANCE_REAL
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ValueError(f"images must be N x C x H x W, got {tuple(self.images.shape)}")
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "LabeledImages":
        return LabeledImages(self.images[idx], self.labels[idx], self.provenance, dict(self.meta))


def _pattern(kind: str, res: int, rng: np.random.Generator) -> np.ndarray:
    """Smooth foreground mask in [0, 1]."""
    yy, xx = (np.mgrid[0:res, 0:res].astype(np.float64) + 0.5) / res
    period = rng.uniform(0.45, 0.9)
    phase = rng.uniform(0, 2 * np.pi)
    if kind == "hgrating":
        return 0.5 + 0.5 * np.sin(2 * np.pi * yy / period + phase)
    if kind == "vgrating":
        return 0.5 + 0.5 * np.sin(2 * np.pi * xx / period + phase)
    if kind == "dgrating":
        return 0.5 + 0.5 * np.sin(2 * np.pi * (xx + yy) / (1.4 * period) + phase)
    cy, cx = rng.uniform(0.3, 0.7, size=2)
    d = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    if kind == "blob":
        r = rng.uniform(0.15, 0.3)
        return np.exp(-0.5 * (d / r) ** 2)
    if kind == "ring":
        r = rng.uniform(0.2, 0.32)
        return np.exp(-0.5 * ((d - r) / 0.08) ** 2)
    raise ValueError(f"unknown pattern {kind!r}")


def _palette(kind: str, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    jitter = rng.uniform(-0.12, 0.12, size=3)
    if kind == "warm":
        fg = np.array([0.9, 0.55, 0.15]) + jitter
    else:
        fg = np.array([0.15, 0.45, 0.9]) + jitter
    bg = rng.uniform(0.05, 0.35) + rng.uniform(-0.05, 0.05, size=3)
    return fg, bg


def class_description(k: int) -> str:
    return f"{PATTERNS[k // len(PALETTES)]}-{PALETTES[k % len(PALETTES)]}"


def make_shapes(n: int, num_classes: int = 10, resolution: int = 32, seed: int = 0,
                noise: float = 0.1) -> LabeledImages:
    """Generate ``n`` images with balanced round-robin labels."""
    if not 1 <= num_classes <= MAX_CLASSES:
        raise ValueError(f"num_classes must be in [1, {MAX_CLASSES}]")
    if resolution < 4:
        raise ValueError("resolution must be >= 4")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % num_classes
    rng.shuffle(labels)
    out = np.empty((n, 3, resolution, resolution), dtype=np.float32)
    for i, k in enumerate(labels):
        mask = _pattern(PATTERNS[k // len(PALETTES)], resolution, rng)
        fg, bg = _palette(PALETTES[k % len(PALETTES)], rng)
        img = mask[None] * fg[:, None, None] + (1 - mask[None]) * bg[:, None, None]
        img = img + noise * rng.standard_normal(img.shape)
        out[i] = np.clip(img, 0.0, 1.0)
    meta = {"kind": "shapes", "n": n, "num_classes": num_classes,
            "resolution": resolution, "seed": seed, "noise": noise}
    return LabeledImages(torch.from_numpy(out), torch.from_numpy(labels.astype(np.int64)),
                         PROVENANCE_REAL, meta)


def channel_stats(images: torch.Tensor) -> tuple[list[float], list[float]]:
    """Per-channel mean and std over a [0, 1] image tensor."""
    x = images.double()
    mean = x.mean(dim=(0, 2, 3))
    std = x.std(dim=(0, 2, 3))
    return [round(float(v), 6) for v in mean], [round(float(v), 6) for v in std]


def normalize(images: torch.Tensor, mean, std) -> torch.Tensor:
    m = torch.as_tensor(mean, dtype=images.dtype).view(1, -1, 1, 1)
    s = torch.as_tensor(std, dtype=images.dtype).view(1, -1, 1, 1)
    return (images - m) / s


def denormalize(images: torch.Tensor, mean, std) -> torch.Tensor:
    m = torch.as_tensor(mean, dtype=images.dtype).view(1, -1, 1, 1)
    s = torch.as_tensor(std, dtype=images.dtype).view(1, -1, 1, 1)
    return images * s + m


def save_corpus(path, data: LabeledImages) -> None:
    np.savez(path, images=data.images.numpy(), labels=data.labels.numpy())


def load_corpus(path, provenance: str = PROVENANCE_REAL) -> LabeledImages:
    with np.load(path) as z:
        return LabeledImages(torch.from_numpy(z["images"].astype(np.float32)),
                             torch.from_numpy(z["labels"].astype(np.int64)),
                             provenance, {"kind": "file", "path": str(path)})
