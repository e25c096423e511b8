import copy
import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import numeric_grad, rel_err, tiny_spec
from invsynth.classifier_zoo import ShapeError, bn_running_stats, build_classifier, freeze
from invsynth.engine import (InversionConfig, NonFiniteLossError, _Components, _latent_for,
                             ablation_toggles, apply_acs, episode_seeds, invert_batch,
                             invert_one_to_many, invert_raw_pixels, load_synth_batch, load_synth_dir,
                             run_inversion, save_synth_batch, synthesize)
from invsynth.losses import total_inversion_loss


def small(**kw):
    base = dict(batch_size=8, num_batches=1, epochs=3, generator_widths=(8, 8, 4), latent_dim=16, seed=0)
    base.update(kw)
    return InversionConfig(**base)


@pytest.fixture(scope="module")
def teacher():
    h = build_classifier(tiny_spec(classes=4, channels=(4, 8, 8)), seed=3)
    return freeze(h)


class TestApplyAcs:
    def test_identity_and_zero(self):
        x = torch.randn(2, 3, 4, 4)
        assert torch.equal(apply_acs(torch.ones(2, 3, 1, 1), x), x)
        assert torch.count_nonzero(apply_acs(torch.zeros(2, 3, 1, 1), x)) == 0

    def test_channel_row(self):
        out = apply_acs(torch.tensor([2.0, 1.0, 0.5]).view(1, 3, 1, 1), torch.ones(1, 3, 4, 4))
        for c, v in enumerate((2.0, 1.0, 0.5)):
            assert torch.all(out[0, c] == v)

    def test_batch_mismatch(self):
        with pytest.raises(ShapeError):
            apply_acs(torch.ones(3, 3, 1, 1), torch.ones(2, 3, 4, 4))

    def test_gradient(self):
        gen = torch.Generator().manual_seed(0)
        a = torch.randn(2, 3, 1, 1, dtype=torch.float64, generator=gen, requires_grad=True)
        x = torch.randn(2, 3, 8, 8, dtype=torch.float64, generator=gen, requires_grad=True)
        w = torch.randn(2, 3, 8, 8, dtype=torch.float64, generator=gen)
        (apply_acs(a, x) * w).sum().backward()
        f = lambda: (apply_acs(a.detach(), x.detach()) * w).sum().item()
        assert rel_err(a.grad, numeric_grad(f, a)) < 1e-4
        assert rel_err(x.grad, numeric_grad(f, x)) < 1e-4


class TestConfig:
    def test_reference_defaults(self):
        c = InversionConfig()
        assert (c.batch_size, c.lr_generator, c.lr_ftp, c.lr_alpha) == (256, 1e-3, 5e-4, 0.05)
        assert (c.alpha_mean, c.alpha_std, c.latent_dim) == (5.0, 1.0, 1024)
        assert (c.weights.bn, c.weights.tv, c.weights.l2) == (10.0, 6e-3, 1.5e-5)

    @pytest.mark.parametrize("kw", [dict(mode="gan"), dict(epochs=-1), dict(lr_alpha=0.0),
                                    dict(batch_size=0), dict(latent_refresh="never")])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            small(**kw).validate()

    def test_dict_roundtrip(self):
        c = small(mode="one-to-many")
        assert InversionConfig.from_dict(c.to_dict()) == c
        assert InversionConfig.from_dict(c.to_dict()).digest() == c.digest()
        with pytest.raises(ValueError):
            InversionConfig.from_dict({"bogus": 1})

    def test_episode_seeds_distinct(self):
        s = episode_seeds(0, 50)
        assert len(set(s)) == 50 and s == episode_seeds(0, 50)


class TestInvertBatch:
    def test_zero_epochs_is_untrained_composition(self, teacher):
        cfg = small(epochs=0)
        out = invert_batch(teacher, cfg, 11)
        assert out.trace == []
        comps = _Components(teacher, cfg, 11)
        with torch.no_grad():
            expected = comps.compose(teacher, _latent_for(teacher, cfg, 11))
        assert torch.equal(out.images, expected)

    def test_deterministic(self, teacher):
        a, b = invert_batch(teacher, small(), 5), invert_batch(teacher, small(), 5)
        assert torch.equal(a.images, b.images) and torch.equal(a.alpha, b.alpha)
        assert a.trace == b.trace

    def test_outputs(self, teacher):
        out = invert_batch(teacher, small(epochs=4), 1)
        assert out.images.shape == (8, 3, 8, 8) and torch.isfinite(out.images).all()
        assert len(out.trace) == 4
        assert out.alpha.shape == (8, 3, 1, 1)

    def test_first_trace_row_is_initial_loss(self, teacher):
        cfg = small(epochs=1)
        out = invert_batch(teacher, cfg, 2)
        comps = _Components(teacher, cfg, 2)
        rep = total_inversion_loss(comps.compose(teacher, _latent_for(teacher, cfg, 2)),
                                   out.labels, teacher, cfg.weights)
        assert out.trace[0]["total"] == pytest.approx(rep.total.item(), rel=1e-6)

    def test_teacher_untouched(self, teacher):
        before = teacher.digest()
        running = [t.clone() for t in bn_running_stats(teacher).means]
        for mode in ("natural", "one-to-many", "raw-pixel"):
            synthesize(teacher, small(mode=mode, num_batches=2))
        assert teacher.digest() == before
        assert all(torch.equal(a, b) for a, b in zip(running, bn_running_stats(teacher).means))

    def test_acs_off_keeps_alpha_one(self, teacher):
        out = invert_batch(teacher, small(use_acs=False, epochs=5), 0)
        assert torch.equal(out.alpha, torch.ones_like(out.alpha))

    def test_alpha_learned(self, teacher):
        cfg = small(epochs=5)
        out = invert_batch(teacher, cfg, 0)
        init = _Components(teacher, cfg, 0).alpha.detach()
        assert (out.alpha - init).abs().mean() > 0

    def test_ftp_off_ignores_taps(self, teacher):
        lat = _latent_for(teacher, small(), 0)

        def compose(use_ftp, perturb):
            comps = _Components(teacher, small(use_ftp=use_ftp), 0)
            t = copy.deepcopy(teacher)
            hooks = []
            if perturb:
                hooks = [s.register_forward_hook(lambda m, i, o: o + 1.0) for s in t.model.stages]
            with torch.no_grad():
                out = comps.compose(t, lat)
            for hk in hooks:
                hk.remove()
            return out

        assert torch.equal(compose(False, False), compose(False, True))
        assert not torch.equal(compose(True, False), compose(True, True))

    def test_non_finite_aborts(self, teacher):
        bad = copy.deepcopy(teacher)
        with torch.no_grad():
            bad.model.fc.bias[0] = float("nan")
        with pytest.raises(NonFiniteLossError) as err:
            invert_batch(bad, small(epochs=3), 0)
        assert len(err.value.trace) == 1


class TestRunInversion:
    def test_counts_and_labels(self, teacher):
        out = run_inversion(teacher, small(batch_size=4, num_batches=3, epochs=1))
        assert sum(len(b) for b in out) == 12
        assert all(b.labels.tolist() == [0, 1, 2, 3] for b in out)

    def test_fresh_generators(self, teacher):
        a, b = run_inversion(teacher, small(num_batches=2, epochs=1))
        assert a.meta["generator_digest_start"] != b.meta["generator_digest_start"]
        assert (a.images.mean(0) - b.images.mean(0)).norm() > 0

    def test_random_label_policy(self, teacher):
        out = run_inversion(teacher, small(batch_size=16, epochs=0, label_policy="random"))
        assert out[0].labels.max() < 4


class TestOneToMany:
    def test_single_batch_matches_one_to_one(self, teacher):
        cfg = small(epochs=4)
        one = invert_batch(teacher, cfg, episode_seeds(cfg.seed, 1)[0])
        many = invert_one_to_many(teacher, small(epochs=4, mode="one-to-many"))[0]
        assert torch.equal(one.images, many.images)
        assert one.trace == many.trace

    def test_generator_persists(self, teacher):
        out = invert_one_to_many(teacher, small(num_batches=3, epochs=2, mode="one-to-many"))
        for prev, nxt in zip(out, out[1:]):
            assert nxt.meta["generator_digest_start"] == prev.meta["generator_digest_end"]

    def test_epoch_refresh_deterministic(self, teacher):
        cfg = small(num_batches=2, epochs=3, mode="one-to-many", latent_refresh="epoch")
        a, b = synthesize(teacher, cfg), synthesize(teacher, cfg)
        assert all(torch.equal(x.images, y.images) for x, y in zip(a, b))


class TestRawPixels:
    def test_zero_epochs_is_noise(self, teacher):
        out = invert_raw_pixels(teacher, small(epochs=0), 4)
        assert out.alpha is None and out.trace == []
        assert abs(out.images.mean().item()) < 0.3 and 0.7 < out.images.std().item() < 1.3

    def test_deterministic(self, teacher):
        a, b = invert_raw_pixels(teacher, small(), 4), invert_raw_pixels(teacher, small(), 4)
        assert torch.equal(a.images, b.images)


@pytest.mark.parametrize("ftp,acs,o2o", list(itertools.product([False, True], repeat=3)))
def test_all_ablations_run(teacher, ftp, acs, o2o):
    cfg = ablation_toggles(small(epochs=1, num_batches=2), ftp=ftp, acs=acs, o2o=o2o)
    assert cfg.mode == ("natural" if o2o else "one-to-many")
    assert (cfg.use_ftp, cfg.use_acs) == (ftp, acs)
    assert len(synthesize(teacher, cfg)) == 2


def test_raw_pixel_mode_survives_toggles():
    assert ablation_toggles(small(mode="raw-pixel"), o2o=False).mode == "raw-pixel"


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_any_seed_gives_finite_images(teacher, seed):
    assert torch.isfinite(invert_batch(teacher, small(epochs=1), seed).images).all()


class TestPersistence:
    def test_roundtrip_and_byte_identity(self, teacher, tmp_path):
        batch = invert_batch(teacher, small(epochs=2), 0)
        m1 = save_synth_batch(batch, tmp_path / "a", 0, "abc", teacher.spec.normalization)
        m2 = save_synth_batch(batch, tmp_path / "b", 0, "abc", teacher.spec.normalization)
        for f in sorted((tmp_path / "a").iterdir()):
            assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()
        back = load_synth_batch(m1)
        assert torch.equal(back.images, batch.images)
        assert torch.equal(back.alpha, batch.alpha)
        assert back.labels.tolist() == batch.labels.tolist()
        assert back.trace == batch.trace
        assert len(load_synth_dir(tmp_path / "a")) == 1
        assert m2.exists()

    def test_empty_dir(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_synth_dir(tmp_path)


class TestToyTeacherConvergence:
    """Seeded behaviour on the trained 8x8, 4-class toy teacher."""

    def cfg(self, **kw):
        base = dict(batch_size=32, num_batches=1, epochs=200, generator_widths=(32, 32, 16))
        base.update(kw)
        return InversionConfig(**base)

    def test_loss_decreases_most_seeds(self, toy_world):
        wins = 0
        for seed in range(5):
            trace = invert_batch(toy_world["teacher"], self.cfg(), seed).trace
            wins += trace[-1]["total"] < trace[0]["total"]
        assert wins >= 4

    def test_moving_average_settles(self, toy_world):
        trace = invert_batch(toy_world["teacher"], self.cfg(epochs=400), 0).trace
        totals = np.array([r["total"] for r in trace])
        windows = [totals[i:i + 50].mean() for i in range(200, 400, 50)]
        for prev, nxt in zip(windows, windows[1:]):
            assert nxt <= prev * 1.02
