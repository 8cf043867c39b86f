import numpy as np
import pytest

from decisionflow import critic_rl as C
from decisionflow.approx import AdamState, adam_step
from decisionflow.dataset import bandit_mode_centers
from decisionflow.errors import ConfigError


def _chain_batch():
    """Deterministic 2-state loop: s0 --(+1, r=1)--> s1 --(-1, r=0)--> s0."""
    return {
        "state": np.array([[0.0], [1.0]]),
        "action": np.array([[1.0], [-1.0]]),
        "reward": np.array([1.0, 0.0]),
        "next_state": np.array([[1.0], [0.0]]),
        "terminal": np.array([0.0, 0.0]),
        "prev_action": np.zeros((2, 1)),
    }


class TestExpectileLoss:
    def test_symmetric_half(self):
        assert C.expectile_loss(2.0, 0.5) == 2.0

    def test_negative_side(self):
        assert abs(C.expectile_loss(-1.0, 0.7) - 0.3) < 1e-15

    def test_positive_side(self):
        assert abs(C.expectile_loss(1.0, 0.7) - 0.7) < 1e-15

    def test_reflection_identity(self):
        rng = np.random.default_rng(0)
        y = rng.normal(size=200)
        for tau in (0.1, 0.3, 0.5, 0.8):
            np.testing.assert_allclose(C.expectile_loss(y, tau),
                                       C.expectile_loss(-y, 1.0 - tau))

    def test_zero_and_nonnegative(self):
        assert C.expectile_loss(0.0, 0.42) == 0.0
        y = np.random.default_rng(1).normal(size=100)
        assert np.all(C.expectile_loss(y, 0.9) >= 0.0)

    def test_rejects_bad_tau(self):
        with pytest.raises(ConfigError):
            C.expectile_loss(1.0, 0.0)


class TestVLoss:
    def test_zero_when_v_equals_target(self):
        critics = C.make_critics(2, 2, q_hidden=(8, 8), v_hidden=(8, 8), seed=0)
        rng = np.random.default_rng(2)
        batch = {
            "state": rng.normal(size=(16, 2)),
            "action": rng.normal(size=(16, 2)),
        }
        q_bar = C.q_value(critics, batch["state"], batch["action"], use_target=True)

        # regress V onto the frozen target until the residual vanishes
        opt = AdamState.for_params(critics.v_net.params, lr=1e-2)
        for _ in range(2000):
            inputs = {"state": batch["state"]}
            v = critics.v_net.forward(inputs)[:, 0]
            err = v - q_bar
            grad, _ = critics.v_net.backward(inputs, (2 * err / len(err))[:, None])
            adam_step(critics.v_net.params, grad, opt)
        loss, _ = C.v_loss(critics, batch)
        assert loss < 1e-4

    def test_scalar_expectile_of_residual(self):
        # V=1, Qbar=3, tau=0.5: residual -2 -> loss 2.0; checked through the
        # public path by direct construction
        assert C.expectile_loss(1.0 - 3.0, 0.5) == 2.0

    def test_half_mse_at_even_expectile(self):
        critics = C.make_critics(2, 2, q_hidden=(8, 8), v_hidden=(8, 8), seed=1)
        rng = np.random.default_rng(3)
        batch = {"state": rng.normal(size=(32, 2)), "action": rng.normal(size=(32, 2))}
        v = critics.v_net.forward({"state": batch["state"]})[:, 0]
        q_bar = C.q_value(critics, batch["state"], batch["action"], use_target=True)
        mse = float(np.mean((v - q_bar) ** 2))
        loss, _ = C.v_loss(critics, batch)
        assert abs(loss - 0.5 * mse) < 1e-12


class TestQLoss:
    def test_bootstrap_target_arithmetic(self):
        assert 1.0 + 0.99 * 2.0 == pytest.approx(2.98)

    def test_terminal_masks_bootstrap(self):
        critics = C.make_critics(1, 1, q_hidden=(8,), v_hidden=(8,), gamma=0.99, seed=2)
        batch = {
            "state": np.array([[0.3]]), "action": np.array([[0.1]]),
            "reward": np.array([1.7]), "next_state": np.array([[5.0]]),
            "terminal": np.array([1.0]),
        }
        q = critics.q_net.forward({"state": batch["state"], "action": batch["action"]})[0, 0]
        loss, _, _ = C.q_loss(critics, batch)
        assert abs(loss - (q - 1.7) ** 2) < 1e-12

    def test_chain_fixed_point(self):
        # hand-solved discounted returns on the 2-state loop:
        # Q0 = 1/(1-g^2), Q1 = g/(1-g^2)
        g = 0.9
        q0_expected = 1.0 / (1.0 - g * g)
        q1_expected = g / (1.0 - g * g)

        critics = C.make_critics(1, 1, q_hidden=(32, 32), v_hidden=(32, 32),
                                 gamma=g, kappa=0.05, seed=3)
        opt_q = AdamState.for_params(critics.q_net.params, lr=1e-3)
        opt_v = AdamState.for_params(critics.v_net.params, lr=1e-3)
        batch = _chain_batch()
        for _ in range(4000):
            loss_v, grad_v = C.v_loss(critics, batch)
            adam_step(critics.v_net.params, grad_v, opt_v)
            loss_q, grad_q, _ = C.q_loss(critics, batch)
            adam_step(critics.q_net.params, grad_q, opt_q)
            critics.update_targets()
        q0 = C.q_value(critics, np.array([0.0]), np.array([1.0]))
        q1 = C.q_value(critics, np.array([1.0]), np.array([-1.0]))
        assert abs(q0 - q0_expected) < 0.01, (q0, q0_expected)
        assert abs(q1 - q1_expected) < 0.01, (q1, q1_expected)


class TestQValue:
    def test_target_equals_online_at_init(self):
        critics = C.make_critics(2, 2, q_hidden=(8, 8), v_hidden=(8,), seed=4)
        rng = np.random.default_rng(5)
        s, a = rng.normal(size=(10, 2)), rng.normal(size=(10, 2))
        np.testing.assert_array_equal(C.q_value(critics, s, a),
                                      C.q_value(critics, s, a, use_target=True))

    def test_target_resyncs_with_kappa_one(self):
        critics = C.make_critics(2, 2, q_hidden=(8, 8), v_hidden=(8,), kappa=1.0, seed=6)
        critics.q_net.params += 0.1
        critics.update_targets()
        rng = np.random.default_rng(7)
        s, a = rng.normal(size=(4, 2)), rng.normal(size=(4, 2))
        np.testing.assert_array_equal(C.q_value(critics, s, a),
                                      C.q_value(critics, s, a, use_target=True))

    def test_twin_takes_minimum(self):
        critics = C.make_critics(2, 2, q_hidden=(8, 8), v_hidden=(8,), twin=True, seed=8)
        rng = np.random.default_rng(9)
        s, a = rng.normal(size=(20, 2)), rng.normal(size=(20, 2))
        q = C.q_value(critics, s, a)
        q1 = critics.q_net.forward({"state": s, "action": a})[:, 0]
        q2 = critics.q_net2.forward({"state": s, "action": a})[:, 0]
        np.testing.assert_array_equal(q, np.minimum(q1, q2))


class TestGradientIsolation:
    def test_v_and_q_grads_do_not_cross(self):
        critics = C.make_critics(2, 2, q_hidden=(10, 10), v_hidden=(10, 10), seed=10)
        rng = np.random.default_rng(11)
        batch = {
            "state": rng.normal(size=(8, 2)), "action": rng.normal(size=(8, 2)),
            "reward": rng.normal(size=8), "next_state": rng.normal(size=(8, 2)),
            "terminal": np.zeros(8),
        }
        q_before = critics.q_net.params.copy()
        _, grad_v = C.v_loss(critics, batch)
        adam_step(critics.v_net.params, grad_v,
                  AdamState.for_params(critics.v_net.params))
        assert np.array_equal(critics.q_net.params, q_before)

        v_before = critics.v_net.params.copy()
        _, grad_q, _ = C.q_loss(critics, batch)
        adam_step(critics.q_net.params, grad_q,
                  AdamState.for_params(critics.q_net.params))
        assert np.array_equal(critics.v_net.params, v_before)


class TestExpectileMeanConvergence:
    def test_v_converges_to_conditional_mean_of_two_actions(self):
        # one state, two dataset actions with different frozen target-Q values
        critics = C.make_critics(1, 1, q_hidden=(16, 16), v_hidden=(16, 16), seed=12)
        batch = {
            "state": np.array([[0.5], [0.5]]),
            "action": np.array([[1.0], [-1.0]]),
        }
        q_bar = C.q_value(critics, batch["state"], batch["action"], use_target=True)
        target_mean = float(q_bar.mean())
        opt = AdamState.for_params(critics.v_net.params, lr=3e-3)
        for _ in range(3000):
            _, grad = C.v_loss(critics, batch)
            adam_step(critics.v_net.params, grad, opt)
        v = C.state_value(critics, np.array([0.5]))
        assert abs(v - target_mean) < 0.01


def test_bandit_critic_prefers_dominant_mode(bandit_dataset):
    critics = C.make_critics(2, 2, q_hidden=(64, 64), v_hidden=(64, 64),
                             gamma=0.99, kappa=0.01, seed=13)
    opt_q = AdamState.for_params(critics.q_net.params, lr=1e-3)
    opt_v = AdamState.for_params(critics.v_net.params, lr=1e-3)
    rng = np.random.default_rng(14)
    for _ in range(2500):
        batch = bandit_dataset.sample(rng, 128)
        _, grad_v = C.v_loss(critics, batch)
        adam_step(critics.v_net.params, grad_v, opt_v)
        _, grad_q, _ = C.q_loss(critics, batch)
        adam_step(critics.q_net.params, grad_q, opt_q)
        critics.update_targets()

    states = rng.uniform(-1, 1, (100, 2))
    m1 = np.stack([bandit_mode_centers(s)[0] for s in states])
    m2 = np.stack([bandit_mode_centers(s)[1] for s in states])
    q1 = C.q_value(critics, states, m1).mean()
    q2 = C.q_value(critics, states, m2).mean()
    assert q1 > q2, (q1, q2)
