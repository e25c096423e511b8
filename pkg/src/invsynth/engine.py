"""Batch-synthesis episodes: generator + feature pyramid + channel scaling.

``natural`` mode builds a fresh generator, pyramid and per-image channel
scales for every batch (one-to-one). ``one-to-many`` keeps a single set of
components across batches and only redraws the latent. ``raw-pixel``
optimizes the image tensor directly under the same objective.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import _io
from .classifier_zoo import ClassifierHandle, ShapeError, bn_running_stats, forward_with_taps
from .data import denormalize
from .ftp import FeatureTransferPyramid, init_ftp
from .generator import LatentBatch, assign_labels, init_generator, sample_latent
from .losses import LossReport, LossWeights, total_inversion_loss

log = logging.getLogger(__name__)

MODES = ("natural", "one-to-many", "raw-pixel")
TRACE_FIELDS = ("epoch",) + LossReport.FIELDS


class NonFiniteLossError(RuntimeError):
    def __init__(self, message: str, trace: list[dict]):
        super().__init__(message)
        self.trace = trace


@dataclass
class InversionConfig:
    batch_size: int = 256
    num_batches: int = 1
    epochs: int = 2000
    lr_generator: float = 1e-3
    lr_ftp: float = 5e-4
    lr_alpha: float = 0.05
    lr_pixels: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weights: LossWeights = field(default_factory=LossWeights)
    mode: str = "natural"
    label_policy: str = "balanced"
    seed: int = 0
    use_ftp: bool = True
    use_acs: bool = True
    ftp_levels: int | None = None
    ftp_conv_tanh: bool = True
    alpha_mean: float = 5.0
    alpha_std: float = 1.0
    latent_dim: int = 1024
    generator_widths: tuple = (128, 128, 64)
    latent_refresh: str = "batch"

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        self.betas = tuple(self.betas)
        self.generator_widths = tuple(self.generator_widths)

    def validate(self) -> "InversionConfig":
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.batch_size < 1 or self.num_batches < 1:
            raise ValueError("batch_size and num_batches must be >= 1")
        if self.latent_refresh not in ("batch", "epoch"):
            raise ValueError("latent_refresh must be 'batch' or 'epoch'")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        for name in ("lr_generator", "lr_ftp", "lr_alpha", "lr_pixels"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["generator_widths"] = list(self.generator_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "InversionConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown inversion config keys: {sorted(unknown)}")
        return cls(**d)

    def digest(self) -> str:
        return _io.digest_obj(self.to_dict())


def ablation_toggles(config: InversionConfig, ftp: bool = True, acs: bool = True,
                     o2o: bool = True) -> InversionConfig:
    """Switch the three components independently; o2o=False means a persistent generator."""
    mode = config.mode
    if mode != "raw-pixel":
        mode = "natural" if o2o else "one-to-many"
    return replace(config, use_ftp=ftp, use_acs=acs, mode=mode)


@dataclass
class SynthBatch:
    images: torch.Tensor
    labels: torch.Tensor
    alpha: torch.Tensor | None
    trace: list
    seed: int
    mode: str = "natural"
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.labels)


def apply_acs(alpha: torch.Tensor, image: torch.Tensor) -> torch.Tensor:
    """Per-image, per-channel scaling; ``alpha`` is batch x 3 x 1 x 1."""
    if alpha.shape[0] != image.shape[0] or alpha.shape[1] != image.shape[1]:
        raise ShapeError(f"alpha {tuple(alpha.shape)} does not fit images {tuple(image.shape)}")
    return alpha * image


def episode_seeds(master_seed: int, count: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(master_seed).generate_state(count)]


def _sub_seeds(episode_seed: int) -> dict[str, int]:
    words = np.random.SeedSequence(episode_seed).generate_state(5)
    return dict(zip(("generator", "ftp", "latent", "alpha", "pixels"), (int(w) for w in words)))


def _module_digest(module: torch.nn.Module) -> str:
    return _io.digest_tensors(module.state_dict())


class _Components:
    """Trainable parts of one synthesis run plus their optimizers."""

    def __init__(self, teacher: ClassifierHandle, config: InversionConfig, episode_seed: int):
        seeds = _sub_seeds(episode_seed)
        spec = teacher.spec
        dtype = next(teacher.model.parameters()).dtype
        self.generator = init_generator(spec.num_classes, seeds["generator"], spec.input_resolution,
                                        config.latent_dim, config.generator_widths).to(dtype)
        self.ftp: FeatureTransferPyramid = init_ftp(spec, seeds["ftp"], config.ftp_levels,
                                                    config.ftp_conv_tanh).to(dtype)
        gen = torch.Generator().manual_seed(seeds["alpha"])
        if config.use_acs:
            init = config.alpha_mean + config.alpha_std * torch.randn(
                config.batch_size, 3, 1, 1, generator=gen)
            self.alpha = torch.nn.Parameter(init.to(dtype))
        else:
            self.alpha = torch.ones(config.batch_size, 3, 1, 1, dtype=dtype)
        adam = dict(betas=config.betas, eps=config.eps)
        self.optimizers = [torch.optim.Adam(self.generator.parameters(), lr=config.lr_generator, **adam),
                           torch.optim.Adam(self.ftp.parameters(), lr=config.lr_ftp, **adam)]
        if config.use_acs:
            self.optimizers.append(torch.optim.Adam([self.alpha], lr=config.lr_alpha, **adam))
        self.use_ftp = config.use_ftp

    def compose(self, teacher: ClassifierHandle, latent) -> torch.Tensor:
        if isinstance(latent, _RefreshingLatent):
            latent = latent.next()
        x = self.generator(latent)
        if self.use_ftp:
            m_last = self.ftp(forward_with_taps(teacher, x).pyramid)[-1]
        else:
            m_last = torch.zeros_like(x)
        return apply_acs(self.alpha, self.ftp.compose(m_last, x))

    def zero_grad(self):
        for opt in self.optimizers:
            opt.zero_grad(set_to_none=True)

    def step(self):
        for opt in self.optimizers:
            opt.step()


class _RefreshingLatent:
    """Latent whose z is redrawn on every generator call after the first; labels are fixed."""

    def __init__(self, first: LatentBatch, seed: int):
        self.current = first
        self.labels = first.labels
        self._gen = torch.Generator().manual_seed(seed ^ 0x5EED)
        self._calls = 0

    def next(self) -> LatentBatch:
        if self._calls:
            z = torch.randn(self.current.z.shape, generator=self._gen).to(self.current.z.dtype)
            self.current = LatentBatch(z, self.current.y)
        self._calls += 1
        return self.current


def _latent_for(teacher: ClassifierHandle, config: InversionConfig, episode_seed: int) -> LatentBatch:
    dtype = next(teacher.model.parameters()).dtype
    return sample_latent(config.batch_size, teacher.spec.num_classes, config.label_policy,
                         _sub_seeds(episode_seed)["latent"], config.latent_dim).to(dtype)


def _optimize(teacher, config, forward, params_step, zero_grad, labels, running, where: str):
    trace = []
    for epoch in range(config.epochs):
        images = forward()
        report = total_inversion_loss(images, labels, teacher, config.weights, running)
        row = {"epoch": epoch, **report.as_row()}
        if not math.isfinite(row["total"]):
            trace.append(row)
            raise NonFiniteLossError(f"{where}: non-finite loss at epoch {epoch}", trace)
        zero_grad()
        report.total.backward()
        params_step()
        trace.append(row)
    return trace


def _run_components(teacher, config, comps: _Components, latent: LatentBatch, seed: int,
                    mode: str) -> SynthBatch:
    labels = latent.labels
    running = bn_running_stats(teacher)
    start = _module_digest(comps.generator)
    trace = _optimize(teacher, config, lambda: comps.compose(teacher, latent), comps.step,
                      comps.zero_grad, labels, running, f"episode {seed}")
    with torch.no_grad():
        images = comps.compose(teacher, latent)
    return SynthBatch(images=images.detach().float().clone(), labels=labels.clone(),
                      alpha=comps.alpha.detach().float().clone(), trace=trace, seed=seed, mode=mode,
                      meta={"generator_digest_start": start,
                            "generator_digest_end": _module_digest(comps.generator)})


def invert_batch(teacher: ClassifierHandle, config: InversionConfig, episode_seed: int) -> SynthBatch:
    """One one-to-one episode: fresh components, fixed latent, ``config.epochs`` updates."""
    config.validate()
    comps = _Components(teacher, config, episode_seed)
    latent = _latent_for(teacher, config, episode_seed)
    return _run_components(teacher, config, comps, latent, episode_seed, "natural")


def run_inversion(teacher: ClassifierHandle, config: InversionConfig) -> list[SynthBatch]:
    config.validate()
    return [invert_batch(teacher, config, s) for s in episode_seeds(config.seed, config.num_batches)]


def invert_one_to_many(teacher: ClassifierHandle, config: InversionConfig) -> list[SynthBatch]:
    """Persistent generator, pyramid, channel scales and optimizers.

    The latent is redrawn once per batch, or before every update when
    ``config.latent_refresh == "epoch"``; labels stay fixed within a batch.
    """
    config.validate()
    seeds = episode_seeds(config.seed, config.num_batches)
    comps = _Components(teacher, config, seeds[0])
    out = []
    for s in seeds:
        latent = _latent_for(teacher, config, s)
        if config.latent_refresh == "epoch":
            latent = _RefreshingLatent(latent, _sub_seeds(s)["latent"])
        out.append(_run_components(teacher, config, comps, latent, s, "one-to-many"))
    return out


def invert_raw_pixels(teacher: ClassifierHandle, config: InversionConfig, seed: int) -> SynthBatch:
    config.validate()
    spec = teacher.spec
    dtype = next(teacher.model.parameters()).dtype
    seeds = _sub_seeds(seed)
    gen = torch.Generator().manual_seed(seeds["pixels"])
    r = spec.input_resolution
    x = torch.nn.Parameter(torch.randn(config.batch_size, 3, r, r, generator=gen).to(dtype))
    labels = torch.as_tensor(assign_labels(config.batch_size, spec.num_classes, config.label_policy,
                                           np.random.default_rng(seeds["latent"])), dtype=torch.long)
    opt = torch.optim.Adam([x], lr=config.lr_pixels, betas=config.betas, eps=config.eps)
    trace = _optimize(teacher, config, lambda: x, opt.step,
                      lambda: opt.zero_grad(set_to_none=True), labels, bn_running_stats(teacher),
                      f"raw-pixel {seed}")
    return SynthBatch(images=x.detach().float().clone(), labels=labels, alpha=None, trace=trace,
                      seed=seed, mode="raw-pixel")


def synthesize(teacher: ClassifierHandle, config: InversionConfig) -> list[SynthBatch]:
    """Dispatch on ``config.mode``; every mode yields ``num_batches`` batches."""
    config.validate()
    if config.mode == "natural":
        return run_inversion(teacher, config)
    if config.mode == "one-to-many":
        return invert_one_to_many(teacher, config)
    return [invert_raw_pixels(teacher, config, s) for s in episode_seeds(config.seed, config.num_batches)]


# ---------------------------------------------------------------- persistence

def trace_csv(trace: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_FIELDS)
    for row in trace:
        w.writerow([row["epoch"]] + [repr(row[k]) for k in TRACE_FIELDS[1:]])
    return buf.getvalue()


def image_grid(images: torch.Tensor, normalization: dict | None, ncol: int | None = None) -> Image.Image:
    """Tile a batch into one RGB image after undoing the teacher normalization."""
    x = images.detach().float()
    if normalization is not None:
        x = denormalize(x, normalization["mean"], normalization["std"])
    x = x.clamp(0, 1)
    n, _, h, w = x.shape
    ncol = ncol or max(1, math.ceil(math.sqrt(n)))
    nrow = math.ceil(n / ncol)
    grid = torch.zeros(3, nrow * (h + 1) + 1, ncol * (w + 1) + 1)
    for i in range(n):
        r, c = divmod(i, ncol)
        grid[:, 1 + r * (h + 1):1 + r * (h + 1) + h, 1 + c * (w + 1):1 + c * (w + 1) + w] = x[i]
    arr = (grid.permute(1, 2, 0).numpy() * 255).round().astype(np.uint8)
    return Image.fromarray(arr, "RGB")


def save_synth_batch(batch: SynthBatch, directory, index: int, config_digest: str,
                     normalization: dict | None = None, png: bool = True) -> Path:
    """Write images/alpha archives, loss CSV, PNG grid and a JSON manifest."""
    directory = Path(directory)
    stem = f"batch_{index:03d}"
    _io.write_f32(directory / f"{stem}.f32", batch.images)
    manifest = {
        "images_file": f"{stem}.f32",
        "shape": list(batch.images.shape),
        "labels": [int(v) for v in batch.labels],
        "seed": batch.seed,
        "mode": batch.mode,
        "config_digest": config_digest,
        "loss_trace": f"{stem}_loss.csv",
        "epochs": len(batch.trace),
        "final_loss": batch.trace[-1] if batch.trace else None,
        "meta": batch.meta,
    }
    if batch.alpha is not None:
        _io.write_f32(directory / f"{stem}_alpha.f32", batch.alpha)
        manifest["alpha_file"] = f"{stem}_alpha.f32"
        manifest["alpha_shape"] = list(batch.alpha.shape)
    _io.atomic_write_text(directory / manifest["loss_trace"], trace_csv(batch.trace))
    if png:
        buf = io.BytesIO()
        image_grid(batch.images, normalization).save(buf, format="PNG")
        _io.atomic_write_bytes(directory / f"{stem}.png", buf.getvalue())
        manifest["png"] = f"{stem}.png"
    return _io.write_json(directory / f"{stem}.json", manifest)


def load_synth_batch(manifest_path) -> SynthBatch:
    manifest_path = Path(manifest_path)
    m = _io.read_json(manifest_path)
    d = manifest_path.parent
    images = _io.read_f32(d / m["images_file"], m["shape"])
    alpha = _io.read_f32(d / m["alpha_file"], m["alpha_shape"]) if "alpha_file" in m else None
    trace = []
    with open(d / m["loss_trace"]) as fh:
        for row in csv.DictReader(fh):
            trace.append({"epoch": int(row["epoch"]), **{k: float(row[k]) for k in TRACE_FIELDS[1:]}})
    return SynthBatch(images, torch.tensor(m["labels"], dtype=torch.long), alpha, trace,
                      m["seed"], m["mode"], m.get("meta", {}))


def load_synth_dir(directory) -> list[SynthBatch]:
    paths = sorted(Path(directory).glob("batch_*.json"))
    if not paths:
        raise FileNotFoundError(f"no batch manifests in {directory}")
    return [load_synth_batch(p) for p in paths]
