"""BN-equipped CNN classifiers that serve as the frozen teacher.

Two families are provided: ``resnet-like`` (stem + basic residual blocks) and
``vgg-like`` (conv/BN/ReLU stacks separated by max-pooling). Every spatial
stage ends in a named tap, ``stage1`` being the shallowest, full-resolution
map; each following stage halves the resolution.
"""

from __future__ import annotations

import copy
import logging
import math
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F
from safetensors.torch import load_file, save_file

from . import _io
from .data import LabeledImages

log = logging.getLogger(__name__)

FAMILIES = ("resnet-like", "vgg-like")


class ShapeError(ValueError):
    """Raised when a tensor does not have the shape an operation requires."""


@dataclass
class ClassifierSpec:
    family: str = "resnet-like"
    stage_channels: tuple = (64, 128, 256, 512)
    num_classes: int = 10
    input_resolution: int = 32
    normalization: dict = field(default_factory=lambda: {"mean": [0.5, 0.5, 0.5],
                                                          "std": [0.25, 0.25, 0.25]})
    blocks_per_stage: int = 1

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)

    def validate(self) -> None:
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        if not self.stage_channels:
            raise ValueError("stage_channels must not be empty")
        if any(c < 1 for c in self.stage_channels):
            raise ValueError("stage channel counts must be positive")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if self.blocks_per_stage < 1:
            raise ValueError("blocks_per_stage must be >= 1")
        smallest = self.input_resolution / 2 ** (len(self.stage_channels) - 1)
        if smallest < 1 or smallest != int(smallest):
            raise ValueError(f"resolution {self.input_resolution} cannot be halved "
                             f"{len(self.stage_channels) - 1} times")
        norm = self.normalization
        if len(norm["mean"]) != 3 or len(norm["std"]) != 3 or min(norm["std"]) <= 0:
            raise ValueError("normalization needs 3 means and 3 positive stds")

    @property
    def tap_names(self) -> list[str]:
        return [f"stage{i + 1}" for i in range(len(self.stage_channels))]

    @property
    def tap_shapes(self) -> list[tuple[int, int, int]]:
        return [(c, self.input_resolution >> i, self.input_resolution >> i)
                for i, c in enumerate(self.stage_channels)]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_channels"] = list(self.stage_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ClassifierSpec":
        return cls(**d)


class BasicBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = nn.Sequential()
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False),
                                          nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


def _conv_bn_relu(cin: int, cout: int) -> list[nn.Module]:
    return [nn.Conv2d(cin, cout, 3, 1, 1, bias=False), nn.BatchNorm2d(cout), nn.ReLU()]


class Classifier(nn.Module):
    def __init__(self, spec: ClassifierSpec):
        super().__init__()
        self.family = spec.family
        chans = spec.stage_channels
        stages = []
        if spec.family == "resnet-like":
            self.stem = nn.Sequential(*_conv_bn_relu(3, chans[0]))
            cin = chans[0]
            for i, c in enumerate(chans):
                blocks = [BasicBlock(cin if b == 0 else c, c, 2 if (i > 0 and b == 0) else 1)
                          for b in range(spec.blocks_per_stage)]
                stages.append(nn.Sequential(*blocks))
                cin = c
        else:
            self.stem = nn.Sequential()
            cin = 3
            for i, c in enumerate(chans):
                layers = [nn.MaxPool2d(2)] if i > 0 else []
                for b in range(spec.blocks_per_stage):
                    layers += _conv_bn_relu(cin if b == 0 else c, c)
                stages.append(nn.Sequential(*layers))
                cin = c
        self.stages = nn.ModuleList(stages)
        self.fc = nn.Linear(chans[-1], spec.num_classes)

    def forward(self, x, with_taps: bool = False):
        h = self.stem(x)
        taps = []
        for stage in self.stages:
            h = stage(h)
            taps.append(h)
        feats = torch.flatten(F.adaptive_avg_pool2d(h, 1), 1)
        logits = self.fc(feats)
        if with_taps:
            return logits, taps, feats
        return logits


@dataclass
class FeaturePyramid:
    """Teacher activations at each downsampling point, shallowest first."""

    maps: list
    names: list

    def __post_init__(self):
        sizes = [m.shape[-1] for m in self.maps]
        if any(b >= a for a, b in zip(sizes, sizes[1:])):
            raise ShapeError(f"pyramid spatial sizes must strictly decrease: {sizes}")
        if len({m.shape[0] for m in self.maps}) > 1:
            raise ShapeError("pyramid maps disagree on batch size")

    def __len__(self):
        return len(self.maps)

    def __getitem__(self, i):
        return self.maps[i]


@dataclass
class LayerBatchStats:
    """Per-channel batch mean and biased variance at the input of every BN layer."""

    means: list
    variances: list


@dataclass
class BnRunningStats:
    means: list
    variances: list

    def __len__(self):
        return len(self.means)


@dataclass
class TapOutput:
    logits: torch.Tensor
    pyramid: FeaturePyramid
    stats: LayerBatchStats
    features: torch.Tensor


@dataclass
class ClassifierHandle:
    spec: ClassifierSpec
    model: Classifier
    seed: int
    accuracy: dict = field(default_factory=dict)
    frozen: bool = False

    @property
    def tap_names(self) -> list[str]:
        return self.spec.tap_names

    @property
    def bn_layers(self) -> list[tuple[str, nn.BatchNorm2d]]:
        return [(n, m) for n, m in self.model.named_modules() if isinstance(m, nn.BatchNorm2d)]

    def digest(self) -> str:
        """Hash over all parameters and buffers, BN running statistics included."""
        return _io.digest_tensors(self.model.state_dict())

    def to(self, dtype: torch.dtype) -> "ClassifierHandle":
        other = copy.deepcopy(self)
        other.model = other.model.to(dtype)
        return other


def build_classifier(spec: ClassifierSpec, seed: int) -> ClassifierHandle:
    spec.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = Classifier(spec)
    model.eval()
    return ClassifierHandle(spec=spec, model=model, seed=seed)


def _check_images(spec: ClassifierSpec, images: torch.Tensor) -> None:
    r = spec.input_resolution
    if images.ndim != 4 or images.shape[1] != 3 or images.shape[2] != r or images.shape[3] != r:
        raise ShapeError(f"expected batch x 3 x {r} x {r} images, got {tuple(images.shape)}")


@contextmanager
def _bn_input_stats(model: nn.Module):
    means, variances = [], []

    def hook(_module, inputs):
        x = inputs[0]
        means.append(x.mean(dim=(0, 2, 3)))
        variances.append(x.var(dim=(0, 2, 3), unbiased=False))

    handles = [m.register_forward_pre_hook(hook) for m in model.modules()
               if isinstance(m, nn.BatchNorm2d)]
    try:
        yield LayerBatchStats(means, variances)
    finally:
        for h in handles:
            h.remove()


def forward_with_taps(handle: ClassifierHandle, images: torch.Tensor) -> TapOutput:
    """One teacher pass returning logits, the feature pyramid and BN-input statistics.

    The model is always run in eval mode, so BN layers normalise with their
    running statistics and nothing about the teacher changes.
    """
    _check_images(handle.spec, images)
    handle.model.eval()
    with _bn_input_stats(handle.model) as stats:
        logits, taps, feats = handle.model(images, with_taps=True)
    return TapOutput(logits, FeaturePyramid(taps, handle.tap_names), stats, feats)


def bn_running_stats(handle: ClassifierHandle) -> BnRunningStats:
    layers = [m for _, m in handle.bn_layers]
    return BnRunningStats([m.running_mean.detach().clone() for m in layers],
                          [m.running_var.detach().clone() for m in layers])


@torch.no_grad()
def evaluate_accuracy(model: nn.Module, data: LabeledImages, batch_size: int = 512) -> tuple[float, float]:
    """(accuracy, mean cross-entropy) of ``model`` in eval mode."""
    was_training = model.training
    model.eval()
    correct, loss_sum = 0, 0.0
    dtype = next(model.parameters()).dtype
    for i in range(0, len(data), batch_size):
        x = data.images[i:i + batch_size].to(dtype)
        y = data.labels[i:i + batch_size]
        logits = model(x)
        loss_sum += float(F.cross_entropy(logits, y, reduction="sum"))
        correct += int((logits.argmax(1) == y).sum())
    model.train(was_training)
    n = max(len(data), 1)
    return correct / n, loss_sum / n


def train_classifier(handle: ClassifierHandle, dataset: LabeledImages, epochs: int,
                     lr: float = 0.05, seed: int = 0, test: LabeledImages | None = None,
                     batch_size: int = 128, weight_decay: float = 5e-4):
    """Train a copy of ``handle`` on normalized images and return it frozen with a report.

    Uses SGD with momentum 0.9 and a cosine schedule. The input handle is not
    modified.
    """
    _check_images(handle.spec, dataset.images)
    if int(dataset.labels.max()) >= handle.spec.num_classes:
        raise ValueError("dataset has labels outside the classifier's class range")
    trained = copy.deepcopy(handle)
    model = trained.model
    for p in model.parameters():
        p.requires_grad_(True)
    opt = torch.optim.SGD(model.parameters(), lr=lr, momentum=0.9, weight_decay=weight_decay)
    steps_per_epoch = math.ceil(len(dataset) / batch_size)
    total = max(epochs * steps_per_epoch, 1)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: 0.5 * (1 + math.cos(math.pi * s / total)))
    gen = torch.Generator().manual_seed(seed)
    for epoch in range(epochs):
        model.train()
        perm = torch.randperm(len(dataset), generator=gen)
        for i in range(0, len(dataset), batch_size):
            idx = perm[i:i + batch_size]
            loss = F.cross_entropy(model(dataset.images[idx]), dataset.labels[idx])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sched.step()
        log.debug("epoch %d loss %.4f", epoch, loss.item())
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    train_acc, train_loss = evaluate_accuracy(model, dataset)
    report = {"train_accuracy": train_acc, "train_loss": train_loss, "epochs": epochs}
    if test is not None:
        report["test_accuracy"], report["test_loss"] = evaluate_accuracy(model, test)
    trained.accuracy = dict(report)
    trained.frozen = True
    return trained, report


def freeze(handle: ClassifierHandle) -> ClassifierHandle:
    handle.model.eval()
    for p in handle.model.parameters():
        p.requires_grad_(False)
    handle.frozen = True
    return handle


def save_checkpoint(handle: ClassifierHandle, path, extra: dict | None = None) -> Path:
    """Write ``<path>.safetensors`` and the ``<path>.json`` sidecar; return the sidecar path."""
    path = Path(path)
    stem = path.with_suffix("") if path.suffix in (".json", ".safetensors") else path
    stem.parent.mkdir(parents=True, exist_ok=True)
    tensors = {k: v.detach().cpu().contiguous() for k, v in handle.model.state_dict().items()}
    params_path = stem.with_name(stem.name + ".safetensors")
    tmp = params_path.with_name("." + params_path.name + ".tmp")
    save_file(tensors, str(tmp))
    tmp.replace(params_path)
    sidecar = {
        "spec": handle.spec.to_dict(),
        "tap_names": handle.tap_names,
        "accuracy": handle.accuracy,
        "normalization": handle.spec.normalization,
        "seed": handle.seed,
        "params_file": params_path.name,
        "params_digest": handle.digest(),
        "extra": extra or {},
    }
    return _io.write_json(stem.with_name(stem.name + ".json"), sidecar)


def load_checkpoint(path) -> tuple[ClassifierHandle, dict]:
    path = Path(path)
    sidecar_path = path if path.suffix == ".json" else path.with_name(path.name + ".json")
    if not sidecar_path.exists():
        raise FileNotFoundError(f"no checkpoint sidecar at {sidecar_path}")
    sidecar = _io.read_json(sidecar_path)
    spec = ClassifierSpec.from_dict(sidecar["spec"])
    handle = build_classifier(spec, sidecar["seed"])
    state = load_file(str(sidecar_path.with_name(sidecar["params_file"])))
    handle.model.load_state_dict(state)
    handle.accuracy = sidecar["accuracy"]
    freeze(handle)
    if handle.digest() != sidecar["params_digest"]:
        raise ValueError(f"parameter digest mismatch for {sidecar_path}")
    return handle, sidecar
