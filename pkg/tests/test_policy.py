import numpy as np
import pytest

from evrec.errors import NonFiniteLoss
from evrec.numerics import finite_diff_check
from evrec.policy import (
    N_INPUTS,
    PPOConfig,
    PolicyNet,
    clipped_surrogate,
    gae_advantages,
    ppo_loss_and_grad,
    ppo_update,
    state_features,
)


class TestGAE:
    def test_monte_carlo_reduction(self, rng):
        r = rng.uniform(size=(3, 5))
        v = rng.normal(size=(3, 5))
        adv, ret = gae_advantages(r, v, gamma=1.0, lam=1.0)
        mc = np.cumsum(r[:, ::-1], axis=1)[:, ::-1]
        np.testing.assert_allclose(adv, mc - v, atol=1e-12)
        np.testing.assert_allclose(ret, mc, atol=1e-12)

    def test_zero(self):
        adv, ret = gae_advantages(np.zeros((2, 4)), np.zeros((2, 4)))
        assert not adv.any() and not ret.any()

    def test_one_step_td(self):
        adv, _ = gae_advantages([[0.7]], [[0.2]], gamma=0.99, lam=0.95, last_values=[0.5])
        assert adv[0, 0] == pytest.approx(0.7 + 0.99 * 0.5 - 0.2)


class TestSurrogate:
    def test_clip_semantics(self):
        adv = np.array([1.0])
        obj_hi, d_hi = clipped_surrogate(np.array([1.5]), adv, 0.2)
        obj_cl, _ = clipped_surrogate(np.array([1.2]), adv, 0.2)
        assert obj_hi[0] == obj_cl[0] == pytest.approx(1.2)
        assert d_hi[0] == 0.0
        # negative advantage: a ratio far below 1 - clip is clipped too
        obj, d = clipped_surrogate(np.array([0.5]), np.array([-1.0]), 0.2)
        assert obj[0] == pytest.approx(-0.8) and d[0] == 0.0
        # and a ratio above 1 + clip is not (pessimistic bound)
        obj, d = clipped_surrogate(np.array([1.5]), np.array([-1.0]), 0.2)
        assert obj[0] == pytest.approx(-1.5) and d[0] == -1.0


def toy_batch(rng, n=2, L=2, net=None):
    net = net or PolicyNet(hidden=5, seed=1)
    inputs = rng.normal(size=(n, L, N_INPUTS))
    logp, values, _ = net.unroll(inputs)
    actions = rng.integers(0, 3, size=(n, L))
    old = np.take_along_axis(logp, actions[..., None], 2)[..., 0] + rng.normal(scale=0.1, size=(n, L))
    return net, inputs, actions, old, rng.normal(size=(n, L)), rng.normal(size=(n, L))


class TestPPOGradients:
    @pytest.mark.parametrize("seed", range(5))
    def test_fd_four_transitions(self, seed):
        rng = np.random.default_rng(seed)
        net, inputs, actions, old, adv, ret = toy_batch(rng)
        cfg = PPOConfig(clip=0.2)
        _, grads, _ = ppo_loss_and_grad(net, inputs, actions, old, adv, ret, cfg)

        def f():
            return ppo_loss_and_grad(net, inputs, actions, old, adv, ret, cfg)[0]

        assert finite_diff_check(f, net.params, grads) <= 1e-5

    def test_zero_advantage_moves_only_by_entropy_and_value(self):
        rng = np.random.default_rng(0)
        net, inputs, actions, old, _, _ = toy_batch(rng)
        _, values, _ = net.unroll(inputs)
        cfg = PPOConfig(entropy_coef=0.0)
        _, grads, _ = ppo_loss_and_grad(net, inputs, actions, old, np.zeros((2, 2)), values, cfg)
        for g in grads.values():
            np.testing.assert_allclose(g, 0.0, atol=1e-15)

    def test_update_runs_and_non_finite_raises(self):
        rng = np.random.default_rng(0)
        net, inputs, actions, old, adv, ret = toy_batch(rng, n=8, L=3)
        batch = {"inputs": inputs, "actions": actions, "logp": old, "adv": adv, "returns": ret}
        before = {k: v.copy() for k, v in net.params.items()}
        cfg = PPOConfig(minibatch=4, epochs=2)
        hist = ppo_update(net, batch, cfg, np.random.default_rng(0), {})
        assert len(hist) == 4
        assert any(not np.array_equal(before[k], net.params[k]) for k in before)
        batch["adv"] = np.full_like(adv, np.nan)
        with pytest.raises(NonFiniteLoss):
            ppo_update(net, batch, cfg, np.random.default_rng(0), {})


class TestNet:
    def test_distribution(self, rng):
        net = PolicyNet(seed=3)
        logp, values, h = net.step(rng.normal(size=(4, N_INPUTS)), net.initial_state(4))
        np.testing.assert_allclose(np.exp(logp).sum(axis=1), 1.0, atol=1e-12)
        assert values.shape == (4,) and h.shape == (4, 32)

    def test_step_matches_unroll(self, rng):
        net = PolicyNet(seed=3)
        x = rng.normal(size=(2, 4, N_INPUTS))
        logp, values, _ = net.unroll(x)
        h = net.initial_state(2)
        for t in range(4):
            lp, v, h = net.step(x[:, t], h)
            np.testing.assert_allclose(lp, logp[:, t], atol=1e-14)
            np.testing.assert_allclose(v, values[:, t], atol=1e-14)

    def test_save_load(self, tmp_path):
        net = PolicyNet(hidden=6, seed=2)
        net.save(tmp_path / "p.json")
        back, meta = PolicyNet.load(tmp_path / "p.json")
        assert meta["hidden"] == 6
        for k in net.params:
            np.testing.assert_array_equal(back.params[k], net.params[k])

    def test_state_features(self):
        b = np.array([[0.2, 0.5, 0.1], [0.0, 0.0, 0.0]])
        x = state_features(b, [0.2, 1.0], [True, False], [0.5, 0.0], [3.0, 6.0],
                           [90.0, np.nan], [-1, 2])
        np.testing.assert_allclose(x[0], [0.2, 0.5, 1, 0.5, 0.5, 1.0, 0.0, 0, 0, 0], atol=1e-15)
        np.testing.assert_allclose(x[1], [1.0, 0.0, 0, 0.0, 1.0, 0.0, 0.0, 0, 0, 1], atol=1e-15)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            PPOConfig(horizon=1)
        with pytest.raises(ValueError):
            PPOConfig(reward="dense")
