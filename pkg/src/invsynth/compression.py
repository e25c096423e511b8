"""Downstream uses of synthesized images: distillation, L1 pruning + fine-tuning, scratch training.

Every training loop here refuses data whose provenance is not ``synthetic``;
real images are only ever used for evaluation.
"""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import _io
from .classifier_zoo import (BasicBlock, Classifier, ClassifierHandle, ClassifierSpec,
                             build_classifier, evaluate_accuracy, freeze)
from .data import PROVENANCE_SYNTHETIC, LabeledImages

log = logging.getLogger(__name__)

LABEL_SOURCES = ("target", "teacher")


class ProvenanceError(ValueError):
    """Raised when non-synthetic data reaches an optimizer step."""


def synth_dataset(batches) -> LabeledImages:
    """Concatenate synthesized batches into one training set."""
    batches = list(batches)
    if not batches:
        raise ValueError("no synthesized batches given")
    return LabeledImages(torch.cat([b.images for b in batches]), torch.cat([b.labels for b in batches]),
                         PROVENANCE_SYNTHETIC, {"batches": len(batches),
                                                "seeds": [b.seed for b in batches]})


def _require_synthetic(data: LabeledImages) -> None:
    if data.provenance != PROVENANCE_SYNTHETIC:
        raise ProvenanceError(f"training data has provenance {data.provenance!r}; "
                              "only synthesized images may be used for training")
    if len(data) == 0:
        raise ValueError("empty synthesized training set")


def _batches(n: int, batch_size: int, gen: torch.Generator):
    perm = torch.randperm(n, generator=gen)
    for i in range(0, n, batch_size):
        yield perm[i:i + batch_size]


def _as_module(model) -> nn.Module:
    return model.model if isinstance(model, ClassifierHandle) else model


def _fit(model: nn.Module, data: LabeledImages, epochs: int, opt, seed: int, batch_size: int,
         loss_fn, schedule=None) -> list[float]:
    """Generic minibatch loop. ``loss_fn(model, images, labels)`` returns a scalar."""
    _require_synthetic(data)
    gen = torch.Generator().manual_seed(seed)
    losses = []
    for _ in range(epochs):
        model.train()
        total, count = 0.0, 0
        for idx in _batches(len(data), batch_size, gen):
            loss = loss_fn(model, data.images[idx], data.labels[idx])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            if schedule is not None:
                schedule.step()
            total += loss.item() * len(idx)
            count += len(idx)
        losses.append(total / count)
    model.eval()
    return losses


def _cosine(opt, epochs: int, steps_per_epoch: int):
    total = max(epochs * steps_per_epoch, 1)
    return torch.optim.lr_scheduler.LambdaLR(opt, lambda s: 0.5 * (1 + math.cos(math.pi * min(s, total) / total)))


# ---------------------------------------------------------------- distillation

@dataclass
class DistillConfig:
    student: dict | None = None  # ClassifierSpec fields; None copies the teacher's spec
    copy_teacher_weights: bool = False
    temperature: float = 4.0
    soft_weight: float = 0.9
    epochs: int = 20
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 128
    seed: int = 0

    def validate(self) -> "DistillConfig":
        if not self.temperature > 0:
            raise ValueError("temperature must be > 0")
        if not 0 <= self.soft_weight <= 1:
            raise ValueError("soft_weight must be in [0, 1]")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


def kd_loss(student_logits: torch.Tensor, teacher_logits: torch.Tensor, temperature: float = 4.0,
            soft_weight: float = 0.9) -> torch.Tensor:
    """soft_weight * T^2 * KL(teacher_T || student_T) + (1 - soft_weight) * CE(student, argmax teacher)."""
    t = temperature
    soft = F.kl_div(F.log_softmax(student_logits / t, dim=1), F.log_softmax(teacher_logits / t, dim=1),
                    reduction="batchmean", log_target=True) * t * t
    hard = F.cross_entropy(student_logits, teacher_logits.argmax(dim=1))
    return soft_weight * soft + (1 - soft_weight) * hard


def make_student(teacher: ClassifierHandle, config: DistillConfig) -> ClassifierHandle:
    if config.copy_teacher_weights:
        student = copy.deepcopy(teacher)
        for p in student.model.parameters():
            p.requires_grad_(True)
        student.frozen = False
        return student
    spec = ClassifierSpec.from_dict(config.student) if config.student else copy.deepcopy(teacher.spec)
    if spec.input_resolution != teacher.spec.input_resolution:
        raise ValueError("student and teacher input resolutions differ")
    return build_classifier(spec, config.seed)


def distill(teacher: ClassifierHandle, config: DistillConfig, synth, test: LabeledImages | None = None):
    """Train a student on synthesized images against the teacher's softened outputs.

    Returns ``(student_handle, report)``; ``report["initial_loss"]`` is the
    distillation loss on the first minibatch before any update.
    """
    config.validate()
    data = synth if isinstance(synth, LabeledImages) else synth_dataset(synth)
    _require_synthetic(data)
    student = make_student(teacher, config)
    model = student.model
    for p in model.parameters():
        p.requires_grad_(True)
    teacher.model.eval()

    def loss_fn(m, x, _y):
        with torch.no_grad():
            t_logits = teacher.model(x)
        return kd_loss(m(x), t_logits, config.temperature, config.soft_weight)

    first = next(_batches(len(data), config.batch_size, torch.Generator().manual_seed(config.seed)))
    model.eval()
    with torch.no_grad():
        initial = loss_fn(model, data.images[first], None).item()
    opt = torch.optim.SGD(model.parameters(), lr=config.lr, momentum=config.momentum,
                          weight_decay=config.weight_decay)
    steps = math.ceil(len(data) / config.batch_size)
    losses = _fit(model, data, config.epochs, opt, config.seed, config.batch_size, loss_fn,
                  _cosine(opt, config.epochs, steps))
    freeze(student)
    report = {"initial_loss": initial, "final_loss": losses[-1] if losses else initial,
              "n_synth": len(data), "config": config.to_dict()}
    if test is not None:
        report["test_accuracy"], report["test_loss"] = evaluate_accuracy(model, test)
        report["teacher_test_accuracy"] = evaluate_accuracy(teacher.model, test)[0]
    return student, report


# ---------------------------------------------------------------- pruning

@dataclass
class PruneConfig:
    ratio: float = 0.5
    local: bool = True
    finetune_epochs: int = 20
    lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 128
    seed: int = 0
    # the unpruned teacher labels the synthesized images it produced
    label_source: str = "teacher"

    def validate(self) -> "PruneConfig":
        if not 0 <= self.ratio < 1:
            raise ValueError("pruning ratio must be in [0, 1)")
        if not self.local:
            raise ValueError("only per-layer (local) pruning is supported")
        if self.label_source not in LABEL_SOURCES:
            raise ValueError(f"label_source must be one of {LABEL_SOURCES}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


def num_pruned(n: int, ratio: float) -> int:
    # the epsilon keeps e.g. 0.7 * 10 from flooring to 6
    return int(math.floor(ratio * n + 1e-9))


def l1_keep_indices(weight: torch.Tensor, ratio: float) -> list[int]:
    """Indices of output filters that survive; lowest-L1 filters go first, ties keep the lower index."""
    n = weight.shape[0]
    k = num_pruned(n, ratio)
    if k >= n:
        raise ValueError(f"ratio {ratio} would remove all {n} filters of a layer")
    norms = weight.detach().abs().flatten(1).sum(1).tolist()
    order = sorted(range(n), key=lambda i: (-norms[i], i))
    return sorted(order[:n - k])


def _slice_conv(conv: nn.Conv2d, out_idx=None, in_idx=None) -> nn.Conv2d:
    w = conv.weight.detach()
    if out_idx is not None:
        w = w[out_idx]
    if in_idx is not None:
        w = w[:, in_idx]
    new = nn.Conv2d(w.shape[1], w.shape[0], conv.kernel_size, conv.stride, conv.padding,
                    bias=conv.bias is not None).to(w.dtype)
    new.weight.data.copy_(w)
    if conv.bias is not None:
        b = conv.bias.detach()
        new.bias.data.copy_(b[out_idx] if out_idx is not None else b)
    return new


def _slice_bn(bn: nn.BatchNorm2d, idx) -> nn.BatchNorm2d:
    new = nn.BatchNorm2d(len(idx), eps=bn.eps, momentum=bn.momentum).to(bn.weight.dtype)
    new.weight.data.copy_(bn.weight.detach()[idx])
    new.bias.data.copy_(bn.bias.detach()[idx])
    new.running_mean.copy_(bn.running_mean[idx])
    new.running_var.copy_(bn.running_var[idx])
    new.num_batches_tracked.copy_(bn.num_batches_tracked)
    return new


def _slice_linear_in(fc: nn.Linear, idx) -> nn.Linear:
    new = nn.Linear(len(idx), fc.out_features).to(fc.weight.dtype)
    new.weight.data.copy_(fc.weight.detach()[:, idx])
    new.bias.data.copy_(fc.bias.detach())
    return new


def _prunable_units(model: Classifier):
    """(name, parent, conv_attr, bn_attr, consumer_setter) for every prunable conv.

    Residual family: only the first conv of each block, whose channels stay
    inside the block. Plain family: every conv, rewiring the next conv or the
    classifier head.
    """
    units = []
    if model.family == "resnet-like":
        for name, m in model.named_modules():
            if isinstance(m, BasicBlock):
                units.append((f"{name}.conv1", m, "conv1", "bn1", ("conv", m, "conv2")))
        return units
    seq = [(f"stages.{si}.{li}", stage, li, layer) for si, stage in enumerate(model.stages)
           for li, layer in enumerate(stage)]
    convs = [(n, parent, i) for n, parent, i, layer in seq if isinstance(layer, nn.Conv2d)]
    for j, (name, parent, i) in enumerate(convs):
        if j + 1 < len(convs):
            _, nparent, ni = convs[j + 1]
            consumer = ("conv", nparent, str(ni))
        else:
            consumer = ("linear", model, "fc")
        units.append((name, parent, str(i), str(i + 1), consumer))
    return units


def l1_prune(model, ratio: float):
    """Per-layer L1-norm filter pruning on a copy of ``model``.

    Returns ``(pruned_model, report)`` where report lists, per pruned conv,
    the filter count, the removed and kept indices.
    """
    if not 0 <= ratio < 1:
        raise ValueError("pruning ratio must be in [0, 1)")
    src = _as_module(model)
    if not isinstance(src, Classifier):
        raise TypeError("l1_prune expects a Classifier or ClassifierHandle")
    pruned = copy.deepcopy(src)
    report = []
    for name, parent, conv_attr, bn_attr, (kind, cparent, cattr) in _prunable_units(pruned):
        conv = getattr(parent, conv_attr) if not conv_attr.isdigit() else parent[int(conv_attr)]
        keep = l1_keep_indices(conv.weight, ratio)
        n = conv.weight.shape[0]
        report.append({"layer": name, "filters": n, "kept": keep,
                       "removed": [i for i in range(n) if i not in set(keep)]})
        if len(keep) == n:
            continue
        bn = getattr(parent, bn_attr) if not bn_attr.isdigit() else parent[int(bn_attr)]
        _set(parent, conv_attr, _slice_conv(conv, out_idx=keep))
        _set(parent, bn_attr, _slice_bn(bn, keep))
        consumer = _get(cparent, cattr)
        if kind == "conv":
            _set(cparent, cattr, _slice_conv(consumer, in_idx=keep))
        else:
            _set(cparent, cattr, _slice_linear_in(consumer, keep))
    pruned.eval()
    return pruned, report


def _get(parent, attr):
    return parent[int(attr)] if attr.isdigit() else getattr(parent, attr)


def _set(parent, attr, module):
    if attr.isdigit():
        parent[int(attr)] = module
    else:
        setattr(parent, attr, module)


def count_parameters(model) -> int:
    return sum(p.numel() for p in _as_module(model).parameters())


def _labels_for(data: LabeledImages, label_source: str, teacher: ClassifierHandle | None) -> LabeledImages:
    if label_source == "target":
        return data
    if teacher is None:
        raise ValueError("label_source='teacher' needs a teacher")
    with torch.no_grad():
        teacher.model.eval()
        labels = teacher.model(data.images).argmax(1)
    return LabeledImages(data.images, labels, data.provenance, dict(data.meta))


def finetune_pruned(pruned: nn.Module, synth, test: LabeledImages, epochs: int = 20, lr: float = 0.001,
                    seed: int = 0, momentum: float = 0.9, weight_decay: float = 0.0,
                    batch_size: int = 128, label_source: str = "teacher",
                    teacher: ClassifierHandle | None = None):
    """Fine-tune with plain cross-entropy on synthesized images; report real test accuracy before/after.

    By default the labels are the unpruned teacher's argmax on each image,
    so ``teacher`` is required unless ``label_source="target"``.
    """
    data = synth if isinstance(synth, LabeledImages) else synth_dataset(synth)
    _require_synthetic(data)
    data = _labels_for(data, label_source, teacher)
    model = copy.deepcopy(_as_module(pruned))
    for p in model.parameters():
        p.requires_grad_(True)
    before = evaluate_accuracy(model, test)
    opt = torch.optim.SGD(model.parameters(), lr=lr, momentum=momentum, weight_decay=weight_decay)
    losses = _fit(model, data, epochs, opt, seed, batch_size,
                  lambda m, x, y: F.cross_entropy(m(x), y))
    after = evaluate_accuracy(model, test)
    return model, {"accuracy_before": before[0], "accuracy_after": after[0],
                   "loss_before": before[1], "loss_after": after[1],
                   "train_losses": losses, "n_synth": len(data)}


def train_from_scratch(model_spec: ClassifierSpec, synth, epochs: int, lr: float = 0.05,
                       batch_size: int = 128, seed: int = 0, train_real: LabeledImages | None = None,
                       test_real: LabeledImages | None = None, momentum: float = 0.9,
                       weight_decay: float = 5e-4, label_source: str = "target",
                       teacher: ClassifierHandle | None = None):
    """Train a randomly initialized classifier on synthesized images only.

    Accuracy and mean loss are then measured on the real train and test
    splits, which never enter an optimizer step.
    """
    data = synth if isinstance(synth, LabeledImages) else synth_dataset(synth)
    _require_synthetic(data)
    data = _labels_for(data, label_source, teacher)
    handle = build_classifier(model_spec, seed)
    model = handle.model
    opt = torch.optim.SGD(model.parameters(), lr=lr, momentum=momentum, weight_decay=weight_decay)
    steps = math.ceil(len(data) / batch_size)
    losses = _fit(model, data, epochs, opt, seed, batch_size,
                  lambda m, x, y: F.cross_entropy(m(x), y), _cosine(opt, epochs, steps))
    freeze(handle)
    report = {"synth_losses": losses, "n_synth": len(data), "epochs": epochs}
    for split, real in (("train", train_real), ("test", test_real)):
        if real is not None:
            report[f"{split}_accuracy"], report[f"{split}_loss"] = evaluate_accuracy(model, real)
    return handle, report


# ---------------------------------------------------------------- results ledger

def append_ledger(path, experiment: str, config: dict, metrics: dict) -> dict:
    """Append one JSON row to a JSON-lines ledger, rewriting the file atomically."""
    path = Path(path)
    row = {"experiment": experiment, "config_digest": _io.digest_obj(config), "metrics": metrics}
    existing = path.read_text() if path.exists() else ""
    _io.atomic_write_text(path, existing + json.dumps(row, sort_keys=True) + "\n")
    return row


def read_ledger(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
