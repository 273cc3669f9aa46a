import numpy as np
import pytest

from oracles import FD_RTOL, fd_gradients, tv_loops
from splitunet import tenfile
from splitunet.attack import (
    AttackConfig,
    Tap,
    dump_paths,
    frozen_replica,
    invert,
    invert_per_sample,
    inversion_loss,
    level_sweep,
    load_taps,
    total_variation,
)
from splitunet.data import gen_phantoms
from splitunet.metrics import ssim
from splitunet.model import ArchSpec, SplitConfig, build_split
from splitunet.tensor import Tensor, no_grad


@pytest.fixture(scope="module")
def encoder():
    encoders, _ = build_split(ArchSpec(), SplitConfig(4), seed=0)
    return encoders[1]


@pytest.fixture(scope="module")
def images():
    return gen_phantoms(2, 4, 32, seed=0).images[:, 1:2].copy()


class TestTotalVariation:
    def test_constant_is_zero(self):
        assert total_variation(Tensor(np.full((1, 1, 5, 5), 0.4))).item() == 0

    def test_step_edge(self):
        assert total_variation(Tensor(np.array([[[[0.0, 1.0], [0.0, 1.0]]]]))).item() == pytest.approx(0.5)

    def test_matches_loop_oracle(self):
        img = np.random.default_rng(0).random((2, 3, 7, 6))
        assert total_variation(Tensor(img)).item() == pytest.approx(tv_loops(img), rel=1e-6)

    def test_gradient(self):
        img = np.random.default_rng(1).permutation(np.arange(32) * 0.1).reshape(1, 2, 4, 4)
        assert fd_gradients(total_variation, [img])[0] < FD_RTOL


class TestInversionLoss:
    cfg = AttackConfig(alpha_act=1.0, alpha_tv=0.0, alpha_l2=0.0)

    def test_zero_when_matching(self):
        x = Tensor(np.ones((1, 2, 3, 3)))
        assert inversion_loss(x, x, Tensor(np.zeros((1, 1, 3, 3))), self.cfg).item() == 0

    def test_unsquared_norm(self):
        x = Tensor(np.zeros((1, 1, 1, 2)))
        y = Tensor(np.array([[[[3.0, 4.0]]]]))
        assert inversion_loss(x, y, Tensor(np.zeros((1, 1, 2, 2))), self.cfg).item() == pytest.approx(5.0)

    def test_weights_combine(self):
        img = np.array([[[[0.0, 1.0], [0.0, 1.0]]]])
        cfg = AttackConfig(alpha_act=0.0, alpha_tv=2.0, alpha_l2=3.0)
        z = Tensor(np.zeros((1, 1, 1, 1)))
        got = inversion_loss(z, z, Tensor(img), cfg).item()
        assert got == pytest.approx(2.0 * 0.5 + 3.0 * np.sqrt(2.0))

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            AttackConfig(alpha_tv=-1)
        with pytest.raises(ValueError):
            AttackConfig(steps=0)


def test_replica_is_frozen_copy(encoder):
    rep = frozen_replica(encoder)
    w = rep.blocks[0].conv_a.weight
    assert not w.requires_grad and rep.parameters() == []
    assert all(p.requires_grad for p in encoder.parameters())
    assert w.data is not encoder.blocks[0].conv_a.weight.data
    np.testing.assert_array_equal(w.data, encoder.blocks[0].conv_a.weight.data)


def test_invert_lowers_objective(encoder, images):
    with no_grad():
        target = encoder.forward(Tensor(images), upto=1)[1].data
    before = [p.data.copy() for p in encoder.parameters()]
    res = invert(encoder, target, 1, AttackConfig(steps=60), seed=0)
    assert res.image.shape == images.shape
    assert res.final_loss <= res.initial_loss
    assert res.final_loss == pytest.approx(res.loss_trace.min())
    assert len(res.loss_trace) == 61
    # the victim encoder is untouched
    assert all(np.array_equal(a, p.data) for a, p in zip(before, encoder.parameters()))
    assert all(p.grad is None for p in encoder.parameters())


def test_priors_only_shrink_the_image(encoder, images):
    with no_grad():
        target = encoder.forward(Tensor(images), upto=0)[0].data
    cfg = AttackConfig(alpha_act=0.0, alpha_tv=0.0, alpha_l2=1.0, steps=40)
    res = invert(encoder, target, 0, cfg, seed=0)
    # a uniform [0, 1) start has norm about sqrt(n / 3)
    assert np.linalg.norm(res.image) < 0.8 * np.sqrt(res.image.size / 3)


def test_invert_deterministic(encoder, images):
    with no_grad():
        target = encoder.forward(Tensor(images), upto=2)[2].data
    a = invert(encoder, target, 2, AttackConfig(steps=10), seed=5)
    b = invert(encoder, target, 2, AttackConfig(steps=10), seed=5)
    assert a.image.tobytes() == b.image.tobytes()


def test_invert_rejects_bad_level(encoder, images):
    with pytest.raises(ValueError):
        invert(encoder, np.zeros((1, 8, 4, 4)), 7)


def test_per_sample_close_to_batched(encoder, images):
    with no_grad():
        target = encoder.forward(Tensor(images), upto=0)[0].data
    cfg = AttackConfig(steps=150)
    batched = invert(encoder, target, 0, cfg, seed=0)
    single = invert_per_sample(encoder, target, 0, cfg, seed=0)
    # loss terms are per-batch norms, so the two differ only through weighting; SSIM stays close
    assert abs(ssim(images, batched.image).mean() - ssim(images, single.image).mean()) < 0.05


def test_sweep_and_dumps(tmp_path, images):
    encoders, _ = build_split(ArchSpec(), SplitConfig(4), seed=0)
    for k in (0, 1):
        with no_grad():
            acts = encoders[k].forward(Tensor(images))
        for level, a in acts.items():
            tenfile.save(dump_paths(tmp_path, k, level)[0], a.data)
        tenfile.save(dump_paths(tmp_path, k, 0)[1], images)
    taps = load_taps(tmp_path, [0, 1], range(5))
    assert len(taps) == 10
    rows = level_sweep(taps, dict(enumerate(encoders)), AttackConfig(steps=3), seed=0)
    assert [(r.site, r.level) for r in rows] == [(k, i) for k in (0, 1) for i in range(5)]
    assert all(r.ssim.shape == (2,) for r in rows)
    with pytest.raises(FileNotFoundError, match="site2_level0.ten"):
        load_taps(tmp_path, [2], [0])


def test_sweep_requires_encoder(images):
    tap = Tap(3, 0, np.zeros((1, 8, 32, 32), np.float32), images[:1])
    with pytest.raises(KeyError):
        level_sweep([tap], {}, AttackConfig(steps=1))
