import os

import pytest
import torch

from invsynth.classifier_zoo import ClassifierSpec, build_classifier, freeze, train_classifier
from invsynth.data import channel_stats, make_shapes, normalize

torch.set_num_threads(1)

TOY_RES, TOY_CLASSES, TOY_CHANNELS = 8, 4, (16, 32, 64)


def numeric_grad(f, x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Central finite differences of scalar ``f()`` w.r.t. every entry of ``x`` (modified in place)."""
    g = torch.zeros_like(x)
    flat, gflat = x.data.view(-1), g.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        hi = float(f())
        flat[i] = orig - eps
        lo = float(f())
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return g


def rel_err(a: torch.Tensor, b: torch.Tensor) -> float:
    return float((a - b).norm() / max(float(b.norm()), 1e-12))


def tiny_spec(res=8, classes=3, channels=(4, 8), family="resnet-like"):
    return ClassifierSpec(family, channels, classes, res, {"mean": [0.4, 0.5, 0.6], "std": [0.2, 0.25, 0.3]})


def randomize_bn(handle, seed=0):
    """Give every BN layer non-trivial running stats and affine params."""
    gen = torch.Generator().manual_seed(seed)
    for _, bn in handle.bn_layers:
        n = bn.num_features
        bn.running_mean.copy_(0.3 * torch.randn(n, generator=gen))
        bn.running_var.copy_(0.5 + torch.rand(n, generator=gen))
        bn.weight.data.copy_(1 + 0.2 * torch.randn(n, generator=gen))
        bn.bias.data.copy_(0.1 * torch.randn(n, generator=gen))
    return handle


@pytest.fixture
def tiny_teacher_double():
    h = build_classifier(tiny_spec(), seed=1)
    randomize_bn(h)
    return freeze(h.to(torch.float64))


def _toy_data(n, seed):
    return make_shapes(n, TOY_CLASSES, TOY_RES, seed=seed)


@pytest.fixture(scope="session")
def toy_world():
    """A trained 8x8, 4-class teacher with normalized real train/test splits."""
    train, test = _toy_data(1000, 1), _toy_data(500, 2)
    mean, std = channel_stats(train.images)
    spec = ClassifierSpec("resnet-like", TOY_CHANNELS, TOY_CLASSES, TOY_RES, {"mean": mean, "std": std})
    train.images = normalize(train.images, mean, std)
    test.images = normalize(test.images, mean, std)
    teacher, report = train_classifier(build_classifier(spec, 7), train, epochs=15, lr=0.05, seed=0, test=test)
    return {"teacher": teacher, "train": train, "test": test, "report": report}


def pytest_collection_modifyitems(config, items):
    if os.environ.get("INVSYNTH_SKIP_SLOW"):
        skip = pytest.mark.skip(reason="INVSYNTH_SKIP_SLOW set")
        for item in items:
            if "slow" in item.keywords:
                item.add_marker(skip)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(RESULTS):
            terminalreporter.write_line(line)
