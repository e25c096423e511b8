"""Sample-quality metrics: Frechet distance, Inception Score, k-NN precision/recall."""

from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from scipy.spatial.distance import cdist
from scipy.special import rel_entr

from .classifier_zoo import ClassifierHandle, forward_with_taps

log = logging.getLogger(__name__)

PENULTIMATE = "penultimate"
LOGITS = "logits"


@dataclass
class EmbeddingSet:
    features: np.ndarray
    source: str = "real"
    embedder: str = ""

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim == 1:
            self.features = self.features[:, None]
        if not np.all(np.isfinite(self.features)):
            raise ValueError("embedding contains non-finite values")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def degenerate(self) -> bool:
        return self.n < self.dim + 1


@dataclass
class MetricReport:
    fd: float
    is_mean: float
    is_std: float
    precision: float
    recall: float
    n_real: int
    n_fake: int
    embedder: str
    k: int = 3
    splits: int = 1
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


@torch.no_grad()
def embed(embedder: ClassifierHandle, images: torch.Tensor, layer: str = PENULTIMATE,
          source: str = "real", batch_size: int = 256) -> EmbeddingSet:
    """Features of ``images`` under a frozen classifier.

    ``layer`` is ``"penultimate"`` (pooled features before the classifier
    head), ``"logits"``, or a tap name, in which case the tap is spatially
    averaged to one vector per image.
    """
    valid = [PENULTIMATE, LOGITS, *embedder.tap_names]
    if layer not in valid:
        raise KeyError(f"unknown embedding layer {layer!r}; expected one of {valid}")
    dtype = next(embedder.model.parameters()).dtype
    chunks = []
    for i in range(0, len(images), batch_size):
        out = forward_with_taps(embedder, images[i:i + batch_size].to(dtype))
        if layer == PENULTIMATE:
            f = out.features
        elif layer == LOGITS:
            f = out.logits
        else:
            f = out.pyramid[embedder.tap_names.index(layer)].mean(dim=(2, 3))
        chunks.append(f.double().cpu().numpy())
    feats = np.concatenate(chunks) if chunks else np.zeros((0, 1))
    return EmbeddingSet(feats, source, embedder.digest()[:16])


def _moments(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mu = x.mean(axis=0)
    cov = np.atleast_2d(np.cov(x, rowvar=False, ddof=1))
    return mu, cov


def _psd_sqrt(cov: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((cov + cov.T) / 2)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def trace_sqrt_product(cov_a: np.ndarray, cov_b: np.ndarray) -> float:
    """tr((A B)^{1/2}) for PSD A, B via the symmetric form A^{1/2} B A^{1/2}."""
    ra = _psd_sqrt(cov_a)
    m = ra @ cov_b @ ra
    w = np.linalg.eigvalsh((m + m.T) / 2)
    return float(np.sqrt(np.clip(w, 0, None)).sum())


def frechet_from_moments(mu_a, cov_a, mu_b, cov_b) -> float:
    diff = np.asarray(mu_a) - np.asarray(mu_b)
    try:
        tr_sqrt = trace_sqrt_product(cov_a, cov_b)
    except np.linalg.LinAlgError:
        eps = 1e-6 * np.eye(len(cov_a))
        log.warning("covariance square root failed; adding %g to the diagonals", 1e-6)
        tr_sqrt = trace_sqrt_product(cov_a + eps, cov_b + eps)
    fd = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2 * tr_sqrt)
    if fd < -1e-6:
        warnings.warn(f"Frechet distance {fd} below the numerical floor", stacklevel=2)
    return max(fd, 0.0)


def frechet_distance(a: EmbeddingSet, b: EmbeddingSet) -> float:
    if a.dim != b.dim:
        raise ValueError(f"embedding widths differ: {a.dim} vs {b.dim}")
    for s in (a, b):
        if s.degenerate:
            warnings.warn(f"{s.source} embedding has n={s.n} <= d={s.dim}; covariance is singular",
                          stacklevel=2)
    return frechet_from_moments(*_moments(a.features), *_moments(b.features))


def inception_score(probs, splits: int = 1) -> tuple[float, float]:
    """exp of the mean KL between per-sample and marginal class distributions, per split."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2:
        raise ValueError("probs must be n x C")
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1) > 1e-5):
        raise ValueError("every probability row must be nonnegative and sum to 1")
    if not 1 <= splits <= len(p):
        raise ValueError("splits must be between 1 and the number of rows")
    scores = []
    for part in np.array_split(p, splits):
        marginal = part.mean(axis=0, keepdims=True)
        kl = rel_entr(part, marginal).sum(axis=1)
        scores.append(float(np.exp(kl.mean())))
    return float(np.mean(scores)), float(np.std(scores))


def _knn_radii(x: np.ndarray, k: int) -> np.ndarray:
    d = cdist(x, x)
    np.fill_diagonal(d, np.inf)
    return np.sort(d, axis=1)[:, k - 1]


def _coverage(points: np.ndarray, manifold: np.ndarray, radii: np.ndarray) -> float:
    d = cdist(points, manifold)
    return float(np.mean((d <= radii[None, :]).any(axis=1)))


def precision_recall(real: EmbeddingSet, fake: EmbeddingSet, k: int = 3) -> tuple[float, float]:
    """k-NN manifold precision (fake inside real balls) and recall (real inside fake balls)."""
    if real.dim != fake.dim:
        raise ValueError(f"embedding widths differ: {real.dim} vs {fake.dim}")
    if min(real.n, fake.n) < k + 1:
        raise ValueError(f"need at least k+1={k + 1} points per set")
    precision = _coverage(fake.features, real.features, _knn_radii(real.features, k))
    recall = _coverage(real.features, fake.features, _knn_radii(fake.features, k))
    return precision, recall


@torch.no_grad()
def class_probabilities(handle: ClassifierHandle, images: torch.Tensor) -> np.ndarray:
    logits = embed(handle, images, LOGITS).features
    logits = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=1, keepdims=True)


def evaluate_sets(embedder: ClassifierHandle, real_images: torch.Tensor, fake_images: torch.Tensor,
                  layer: str = PENULTIMATE, k: int = 3, splits: int = 1) -> MetricReport:
    """All metrics for one embedder; IS comes from the embedder's own softmax on ``fake_images``."""
    a = embed(embedder, real_images, layer, "real")
    b = embed(embedder, fake_images, layer, "synthesized")
    notes = [f"{s.source} set degenerate (n={s.n}, d={s.dim})" for s in (a, b) if s.degenerate]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        fd = frechet_distance(a, b)
    is_mean, is_std = inception_score(class_probabilities(embedder, fake_images), splits)
    p, r = precision_recall(a, b, k)
    return MetricReport(fd, is_mean, is_std, p, r, a.n, b.n, a.embedder, k, splits, notes)
