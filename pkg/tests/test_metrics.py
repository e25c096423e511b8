import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import sqrtm

from conftest import tiny_spec
from invsynth.classifier_zoo import build_classifier, freeze
from invsynth.metrics import (EmbeddingSet, embed, evaluate_sets, frechet_distance,
                              frechet_from_moments, inception_score, precision_recall,
                              trace_sqrt_product)


def gauss(n, d, shift=0.0, seed=0):
    return EmbeddingSet(np.random.default_rng(seed).standard_normal((n, d)) + shift)


class TestFrechet:
    def test_self_is_zero(self):
        a = gauss(500, 4)
        assert frechet_distance(a, a) == pytest.approx(0.0, abs=1e-6)

    def test_analytic_unit_shift(self):
        assert frechet_from_moments(np.zeros(1), np.eye(1), np.ones(1), np.eye(1)) == pytest.approx(1.0, abs=1e-12)

    def test_sampled_unit_shift(self):
        fd = frechet_distance(gauss(10_000, 1, 0.0, seed=1), gauss(10_000, 1, 1.0, seed=2))
        assert fd == pytest.approx(1.0, abs=0.05)

    def test_symmetric(self):
        a, b = gauss(300, 3, seed=1), gauss(300, 3, 0.5, seed=2)
        assert frechet_distance(a, b) == pytest.approx(frechet_distance(b, a), rel=1e-9)

    def test_trace_sqrt_matches_scipy(self):
        rng = np.random.default_rng(0)
        x, y = rng.standard_normal((5, 5)), rng.standard_normal((5, 5))
        a, b = x @ x.T, y @ y.T
        assert trace_sqrt_product(a, b) == pytest.approx(np.trace(sqrtm(a @ b)).real, rel=1e-8)

    def test_width_mismatch(self):
        with pytest.raises(ValueError):
            frechet_distance(gauss(10, 2), gauss(10, 3))

    def test_degenerate_warns(self):
        with pytest.warns(UserWarning):
            frechet_distance(gauss(3, 5), gauss(3, 5, seed=1))

    def test_monotone_in_shift(self):
        base = gauss(400, 2, seed=3)
        fds = [frechet_distance(base, EmbeddingSet(base.features + s)) for s in (0.0, 0.5, 1.0, 2.0)]
        assert all(x < y for x, y in zip(fds, fds[1:]))


class TestInceptionScore:
    def test_uniform_rows(self):
        assert inception_score(np.full((20, 10), 0.1))[0] == pytest.approx(1.0, abs=1e-9)

    def test_covering_one_hot(self):
        assert inception_score(np.eye(10)[np.arange(50) % 10])[0] == pytest.approx(10.0, abs=1e-9)

    def test_single_class(self):
        p = np.zeros((30, 10))
        p[:, 4] = 1
        assert inception_score(p)[0] == pytest.approx(1.0, abs=1e-9)

    def test_not_normalized(self):
        with pytest.raises(ValueError):
            inception_score(np.full((4, 3), 0.3))

    def test_splits(self):
        mean, std = inception_score(np.eye(4)[np.arange(48) % 4], splits=4)
        assert mean == pytest.approx(4.0) and std == pytest.approx(0.0, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(2, 30), c=st.integers(2, 12), seed=st.integers(0, 10_000))
def test_inception_score_bounds(n, c, seed):
    logits = np.random.default_rng(seed).standard_normal((n, c)) * 3
    p = np.exp(logits) / np.exp(logits).sum(1, keepdims=True)
    score = inception_score(p)[0]
    assert 1 - 1e-9 <= score <= c + 1e-9


class TestPrecisionRecall:
    def test_identical(self):
        a = gauss(200, 2)
        assert precision_recall(a, a) == (1.0, 1.0)

    def test_disjoint_clusters(self):
        p, r = precision_recall(gauss(200, 2, 0.0, 1), gauss(200, 2, 100.0, 2))
        assert p == pytest.approx(0.0, abs=0.02) and r == pytest.approx(0.0, abs=0.02)

    def test_one_of_two_modes(self):
        real = EmbeddingSet(np.vstack([gauss(200, 2, 0.0, 1).features, gauss(200, 2, 100.0, 2).features]))
        fake = gauss(200, 2, 0.0, 3)
        p, r = precision_recall(real, fake)
        assert p > 0.9
        assert r == pytest.approx(0.5, abs=0.05)

    def test_brute_force_membership(self):
        rng = np.random.default_rng(5)
        real, fake, k = rng.standard_normal((12, 2)), rng.standard_normal((9, 2)) + 0.7, 3
        radii = [sorted(np.linalg.norm(real[i] - real[j]) for j in range(12) if j != i)[k - 1]
                 for i in range(12)]
        inside = [any(np.linalg.norm(f - real[i]) <= radii[i] for i in range(12)) for f in fake]
        assert precision_recall(EmbeddingSet(real), EmbeddingSet(fake), k)[0] == pytest.approx(np.mean(inside))

    def test_too_few_points(self):
        with pytest.raises(ValueError):
            precision_recall(gauss(3, 2), gauss(10, 2), k=3)


@settings(max_examples=25, deadline=None)
@given(n=st.integers(5, 40), seed=st.integers(0, 10_000))
def test_precision_recall_bounds_and_identity(n, seed):
    a, b = gauss(n, 3, seed=seed), gauss(n, 3, 0.3, seed=seed + 1)
    p, r = precision_recall(a, b)
    assert 0 <= p <= 1 and 0 <= r <= 1
    assert precision_recall(a, a) == (1.0, 1.0)


class TestEmbed:
    @pytest.fixture
    def handle(self):
        return freeze(build_classifier(tiny_spec(), seed=0))

    def test_shapes_and_layers(self, handle):
        x = torch.randn(6, 3, 8, 8)
        assert embed(handle, x).features.shape == (6, 8)
        assert embed(handle, x, "logits").features.shape == (6, 3)
        assert embed(handle, x, "stage1").features.shape == (6, 4)
        with pytest.raises(KeyError):
            embed(handle, x, "fc7")

    def test_identical_rows_and_pure(self, handle):
        x = torch.randn(1, 3, 8, 8).repeat(2, 1, 1, 1)
        f = embed(handle, x).features
        assert np.array_equal(f[0], f[1])
        assert np.array_equal(embed(handle, x).features, f)

    def test_order_preserved_across_chunks(self, handle):
        x = torch.randn(7, 3, 8, 8)
        full = embed(handle, x).features
        assert np.allclose(embed(handle, x, batch_size=3).features, full, atol=1e-6)
        assert np.allclose(embed(handle, x[3:4]).features[0], full[3], atol=1e-6)

    def test_evaluate_self(self, handle):
        x = torch.randn(40, 3, 8, 8, generator=torch.Generator().manual_seed(0))
        rep = evaluate_sets(handle, x, x)
        assert rep.fd == pytest.approx(0.0, abs=1e-6)
        assert (rep.precision, rep.recall) == (1.0, 1.0)
        assert rep.embedder == handle.digest()[:16]
        assert 1 <= rep.is_mean <= 3
