import numpy as np
import pytest

from decisionflow.checks import run_gradient_probes
from decisionflow.errors import GenerationDivergenceError, InputShapeError
from decisionflow.flowcore import (FlowPolicy, FlowTimeGrid, cfm_loss,
                                   euler_step, generate_action,
                                   normalize_velocity, sample_path,
                                   velocity_regression_grad)

from oracles import GaussianCaseOracle, analytic_conditional_mean


def _bias_policy(bias, state_dim=2):
    """Flow policy that ignores its inputs and emits a constant velocity."""
    bias = np.asarray(bias, dtype=np.float64)
    da = bias.size
    pol = FlowPolicy(state_dim, da, hidden=(), seed=0)
    params = np.zeros_like(pol.net.params)
    params[-da:] = bias
    pol.params = params
    return pol


class TestSamplePath:
    def test_midpoint(self):
        p = sample_path(np.array([0.0]), np.array([4.0]), 0.5)
        assert p.x_t[0] == 2.0
        assert p.u_cond[0] == 4.0

    def test_boundaries(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            z = rng.normal(size=3)
            a = rng.normal(size=3)
            assert np.array_equal(sample_path(z, a, 0.0).x_t, z)
            assert np.array_equal(sample_path(z, a, 1.0).x_t, a)

    def test_u_cond_independent_of_t(self):
        rng = np.random.default_rng(1)
        z, a = rng.normal(size=2), rng.normal(size=2)
        for t in (0.0, 0.3, 0.9):
            np.testing.assert_array_equal(sample_path(z, a, t).u_cond, a - z)

    def test_rejects_out_of_range_t(self):
        with pytest.raises(ValueError):
            sample_path(np.zeros(2), np.ones(2), 1.5)
        with pytest.raises(ValueError):
            sample_path(np.zeros(2), np.ones(2), -0.1)

    def test_rejects_shape_mismatch(self):
        with pytest.raises(InputShapeError):
            sample_path(np.zeros(2), np.ones(3), 0.5)


class TestEulerStep:
    def test_arithmetic(self):
        assert euler_step(np.array([2.0]), np.array([4.0]), 0.1)[0] == 2.4

    def test_zero_velocity_fixed_point(self):
        x = np.array([1.0, -2.0, 3.0])
        np.testing.assert_array_equal(euler_step(x, np.zeros(3), 0.37), x)

    def test_grid_matches_paper_steps(self):
        grid = FlowTimeGrid(10)
        np.testing.assert_allclose(grid.step_times(),
                                   [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9])
        assert grid.dt * grid.T == 1.0


class TestNormalizeVelocity:
    def test_three_four_five(self):
        out, degen = normalize_velocity(np.array([3.0, 4.0]))
        np.testing.assert_allclose(out, [0.6, 0.8])
        assert not degen

    def test_unit_vector_unchanged(self):
        u = np.array([1.0, 0.0, 0.0])
        out, _ = normalize_velocity(u)
        np.testing.assert_allclose(out, u)

    def test_zero_flagged(self):
        out, degen = normalize_velocity(np.zeros(2))
        assert np.array_equal(out, np.zeros(2))
        assert degen


class TestGenerateAction:
    def test_zero_policy_returns_noise(self):
        pol = _bias_policy([0.0, 0.0])
        grid = FlowTimeGrid(10)
        a1, _ = generate_action(pol, np.zeros(2), grid, np.random.default_rng(4))
        a0 = np.random.default_rng(4).standard_normal((1, 2))[0]
        np.testing.assert_array_equal(a1, a0)

    def test_constant_velocity_telescopes(self):
        c = np.array([0.5, -1.25])
        pol = _bias_policy(c)
        grid = FlowTimeGrid(10)
        a1, _ = generate_action(pol, np.zeros(2), grid, np.random.default_rng(5))
        a0 = np.random.default_rng(5).standard_normal((1, 2))[0]
        np.testing.assert_allclose(a1, a0 + c, rtol=0, atol=1e-12)

    def test_recorded_path_satisfies_recursion(self):
        pol = FlowPolicy(2, 2, hidden=(12, 12), seed=8)
        grid = FlowTimeGrid(7)
        states = np.random.default_rng(6).uniform(-1, 1, (5, 2))
        a1, path = generate_action(pol, states, grid, np.random.default_rng(7),
                                   record_path=True)
        assert len(path) == grid.T
        a = path[0][0]
        for tau, (a_rec, u_rec) in enumerate(path):
            np.testing.assert_array_equal(a, a_rec)
            np.testing.assert_array_equal(
                u_rec, pol.velocity(states, a_rec, grid.time_of(tau)))
            a = a + grid.dt * u_rec
        np.testing.assert_array_equal(a, a1)

    def test_divergence_names_step(self):
        pol = _bias_policy([np.inf, 0.0])
        with pytest.raises(GenerationDivergenceError) as exc:
            generate_action(pol, np.zeros(2), FlowTimeGrid(5), np.random.default_rng(0))
        assert exc.value.step == 0
        assert "step 0" in str(exc.value)


class TestCfmLoss:
    def test_zero_residual_gives_zero_loss(self):
        pol = FlowPolicy(2, 2, hidden=(8,), seed=1)
        rng = np.random.default_rng(2)
        states = rng.uniform(-1, 1, (16, 2))
        a_t = rng.normal(size=(16, 2))
        t = rng.random(16)
        targets = pol.velocity(states, a_t, t)
        loss, grad = velocity_regression_grad(pol, states, a_t, t, targets)
        assert loss == 0.0
        assert not grad.any()

    def test_unit_residual_gives_unit_loss(self):
        pol = _bias_policy([1.0, 0.0])
        loss, _ = velocity_regression_grad(
            pol, np.zeros((1, 2)), np.zeros((1, 2)), 0.3, np.zeros((1, 2)))
        assert loss == 1.0

    def test_empty_batch_rejected(self):
        pol = FlowPolicy(2, 2, hidden=(4,), seed=0)
        with pytest.raises(InputShapeError):
            cfm_loss(pol, np.zeros((0, 2)), np.zeros((0, 2)), np.random.default_rng(0))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(9)
        states = rng.uniform(-1, 1, (12, 2))
        actions = rng.normal(size=(12, 2))

        def loss_and_grad(p):
            pol = FlowPolicy(2, 2, hidden=(10, 10), seed=0, params=p)
            return cfm_loss(pol, states, actions, np.random.default_rng(77))

        pol0 = FlowPolicy(2, 2, hidden=(10, 10), seed=21)
        ok, worst = run_gradient_probes(loss_and_grad, pol0.net.params, seed=3,
                                        probes=120)
        assert ok, f"worst relative error {worst}"


@pytest.fixture(scope="module")
def gaussian_oracle():
    return GaussianCaseOracle(n_samples=1_000_000, seed=510)


class TestConditionalMeanOracle:
    def test_oracle_agrees_with_closed_form(self, gaussian_oracle):
        # validates the Monte-Carlo oracle itself before it judges anything
        worst = 0.0
        for t in gaussian_oracle.t_values:
            xs = gaussian_oracle.bulk_points(float(t))
            est = gaussian_oracle.mean_velocity(xs, float(t))
            ref = analytic_conditional_mean(xs, float(t))
            worst = max(worst, float(np.max(np.abs(est - ref))))
        assert worst < 0.02, f"oracle deviates from closed form by {worst}"
