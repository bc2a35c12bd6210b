import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from flowedit_lab.acceptance import gradient_check
from flowedit_lab.gmm import GaussianMixture, analytic_velocity
from flowedit_lab.learn import (TrainConfig, TrainingError, TrainResult, VelocityNet, flow_matching_batch,
                                net_for, silu, silu_grad, time_features, train)


def randomized(net, seed):
    g = np.random.default_rng(seed)
    net.set_flat(g.normal(scale=0.5, size=net.n_params))
    return net


def test_silu_and_derivative():
    a = np.linspace(-6, 6, 101)
    np.testing.assert_allclose(silu(a), a / (1 + np.exp(-a)), rtol=1e-14)
    h = 1e-6
    np.testing.assert_allclose(silu_grad(a), (silu(a + h) - silu(a - h)) / (2 * h), rtol=1e-7, atol=1e-9)


def test_time_features_layout():
    f = time_features(np.array([0.25]))
    k = np.arange(1, 5)
    np.testing.assert_allclose(f[0], np.concatenate([[0.25], np.sin(np.pi * k * 0.25), np.cos(np.pi * k * 0.25)]))


@given(st.sampled_from([(4,), (5, 3), (8, 8, 8)]), st.integers(0, 1000))
def test_gradients_match_finite_differences(hidden, seed):
    net = randomized(VelocityNet(2, ["a", "b"], hidden=hidden, coord_scale=0.3, out_scale=2.0), seed)
    g = np.random.default_rng(seed)
    z = g.normal(size=(16, 2))
    feats = net.features(z, g.uniform(size=16), g.integers(0, 2, size=16))
    target = g.normal(size=(16, 2))
    assert gradient_check(net, feats, target, n_weights=min(20, net.n_params), seed=seed) < 1e-4


def test_loss_is_mean_squared_norm():
    net = randomized(VelocityNet(2, ["a"], hidden=(3,)), 0)
    feats = net.features(np.ones((4, 2)), 0.5, "a")
    target = np.arange(8.0).reshape(4, 2)
    loss, _ = net.loss_and_grad(feats, target)
    out = net.forward(np.ones((4, 2)), 0.5, "a")
    assert loss == pytest.approx(np.mean(np.sum((out - target) ** 2, axis=1)), rel=1e-14)


def test_initial_field_is_zero_and_finite_on_grid():
    net = VelocityNet(2, ["src", "tar"])
    xs = np.linspace(-50, 50, 100)
    grid = np.array(np.meshgrid(xs, xs)).reshape(2, -1).T
    assert grid.shape[0] == 10_000
    out = net.forward(grid, 0.3, "tar")
    np.testing.assert_array_equal(out, 0.0)
    assert np.all(np.isfinite(randomized(net, 1).forward(grid, 0.7, "src")))


def test_init_is_seeded():
    a = VelocityNet(2, ["x"], seed=1).get_flat()
    assert np.array_equal(a, VelocityNet(2, ["x"], seed=1).get_flat())
    assert not np.array_equal(a, VelocityNet(2, ["x"], seed=2).get_flat())


def test_checkpoint_round_trip_and_manifest(tmp_path):
    net = randomized(VelocityNet(2, ["src", "tar"], hidden=(6, 5), coord_scale=0.1, out_scale=9.0), 3)
    path = tmp_path / "w.npz"
    net.save(path)
    back = VelocityNet.load(path)
    np.testing.assert_array_equal(back.get_flat(), net.get_flat())
    assert back.manifest() == net.manifest()
    with np.load(path) as data:
        assert json.loads(str(data["manifest"]))["shapes"] == [[13, 6], [6], [6, 5], [5], [5, 2], [2]]


def test_checkpoint_shape_mismatch_rejected(tmp_path):
    net = VelocityNet(2, ["src"], hidden=(4,))
    man = net.manifest()
    man["hidden"] = [5]
    arrays = {f"p{j}": p for j, p in enumerate(net.params)}
    path = tmp_path / "bad.npz"
    np.savez(path, manifest=np.array(json.dumps(man)), **arrays)
    with pytest.raises(ValueError, match="shapes"):
        VelocityNet.load(path)


def test_flow_matching_batch_targets():
    mix = {"a": GaussianMixture.isotropic([[5.0, 0.0]]), "b": GaussianMixture.isotropic([[-5.0, 0.0]])}
    z, t, cond, target = flow_matching_batch(mix, 4096, 0, 3)
    assert np.all((t > 0) & (t <= 1))
    assert set(np.unique(cond)) == {0, 1}
    x1 = z + (1 - t)[:, None] * target
    assert abs(x1.mean()) < 0.05 and abs(x1.std() - 1) < 0.05
    x0 = x1 - target
    np.testing.assert_allclose(x0[cond == 0].mean(axis=0), [5.0, 0.0], atol=0.1)


def test_short_training_reduces_loss_and_is_deterministic():
    mix = {"a": GaussianMixture.isotropic([[3.0, 3.0], [-3.0, -3.0]])}
    cfg = TrainConfig(iterations=600, log_every=100, eval_batch_size=512)
    r1 = train(net_for(mix), cfg, mix)
    r2 = train(net_for(mix), cfg, mix)
    np.testing.assert_array_equal(r1.net.get_flat(), r2.net.get_flat())
    assert r1.eval_curve[-1] < 0.5 * r1.initial_loss
    assert len(r1.loss_curve) == len(r1.loss_stderr) == 6


def test_lr_schedule():
    cfg = TrainConfig(iterations=101, learning_rate=1e-3, final_lr_fraction=0.01)
    assert cfg.lr_at(1) == pytest.approx(1e-3)
    assert cfg.lr_at(101) == pytest.approx(1e-5)
    assert TrainConfig(lr_schedule="constant").lr_at(500) == 1e-3


def test_divergence_raises():
    mix = {"a": GaussianMixture.isotropic([[3.0, 3.0]])}
    cfg = TrainConfig(iterations=400, learning_rate=5.0, lr_schedule="constant",
                      divergence_factor=1.5, divergence_patience=20)
    with pytest.raises(TrainingError):
        train(net_for(mix), cfg, mix)


def test_significant_increase_detection():
    r = TrainResult(None, loss_curve=[10.0, 9.0, 9.1, 12.0], loss_stderr=[0.1, 0.1, 0.1, 0.1])
    assert r.significant_increases() == [3]


def test_bad_training_config():
    with pytest.raises(ValueError):
        TrainConfig(lr_schedule="step")
    with pytest.raises(ValueError):
        TrainConfig(iterations=0)


def test_trained_network_approximates_velocity():
    gmm = GaussianMixture.isotropic([[2.0, -1.0]])
    mix = {"g": gmm}
    result = train(net_for(mix), TrainConfig(iterations=3000, eval_batch_size=512), mix)
    z = np.random.default_rng(0).normal(size=(500, 2)) + [1.0, -0.5]
    for t in (0.3, 0.6):
        err = result.net.forward(z, t, "g") - analytic_velocity(gmm, t, z)
        assert np.sqrt(np.mean(np.sum(err**2, axis=1))) < 0.3
