"""Flow-matching substrate: linear path, CFM loss, time grid, Euler sampler.

The conditional path between a noise draw x0 and a data action x1 is linear,
x_t = (1-t) x0 + t x1, so the conditional velocity is x1 - x0 at every t.
Actions are generated by Euler-integrating the learned velocity field over a
uniform grid of T steps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .approx import Approximator
from .errors import ConfigError, GenerationDivergenceError, InputShapeError

VELOCITY_EPS = 1e-8


@dataclass(frozen=True)
class FlowTimeGrid:
    """Uniform discretization of flow time [0, 1] into T generation steps."""

    T: int

    def __post_init__(self):
        if self.T < 1:
            raise ConfigError("flow step count T must be >= 1")

    @property
    def dt(self) -> float:
        return 1.0 / self.T

    def time_of(self, tau: int) -> float:
        if not 0 <= tau <= self.T:
            raise ConfigError(f"discrete flow step {tau} outside 0..{self.T}")
        return tau * self.dt

    def step_times(self) -> np.ndarray:
        """Times at which the velocity field is evaluated: tau*dt for tau < T."""
        return np.arange(self.T) * self.dt


@dataclass
class PathSample:
    """One point on the linear conditional path, with its target velocity."""

    x0: np.ndarray
    x1: np.ndarray
    t: np.ndarray
    x_t: np.ndarray
    u_cond: np.ndarray


def sample_path(x0, x1, t) -> PathSample:
    """Interpolate the linear path at time t; t may be scalar or per-row."""
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    if x0.shape != x1.shape:
        raise InputShapeError(f"path endpoints have shapes {x0.shape} != {x1.shape}")
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0.0) or np.any(t_arr > 1.0):
        raise ValueError("flow time t must lie in [0, 1]")
    tb = t_arr.reshape(-1, 1) if (t_arr.ndim == 1 and x0.ndim == 2) else t_arr
    x_t = (1.0 - tb) * x0 + tb * x1
    return PathSample(x0=x0, x1=x1, t=t_arr, x_t=x_t, u_cond=x1 - x0)


def euler_step(x_t, u, dt: float) -> np.ndarray:
    """One explicit Euler step x + dt*u."""
    x_t = np.asarray(x_t, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    if x_t.shape != u.shape:
        raise InputShapeError(f"state/velocity shapes differ: {x_t.shape} vs {u.shape}")
    if dt <= 0.0:
        raise ConfigError("Euler step size must be positive")
    return x_t + dt * u


def normalize_velocity(u) -> tuple[np.ndarray, np.ndarray]:
    """Unit-norm direction of u; near-zero rows come back as zero, flagged.

    Returns (directions, degenerate mask).  Zero velocities are a legitimate
    early-training state, so they are flagged rather than raised.
    """
    u = np.asarray(u, dtype=np.float64)
    single = u.ndim == 1
    ub = u.reshape(1, -1) if single else u
    norms = np.linalg.norm(ub, axis=1)
    degenerate = norms < VELOCITY_EPS
    safe = np.where(degenerate, 1.0, norms)
    out = ub / safe[:, None]
    out[degenerate] = 0.0
    if single:
        return out[0], bool(degenerate[0])
    return out, degenerate


class FlowPolicy:
    """Velocity-field approximator u(state, intermediate action, time)."""

    def __init__(self, state_dim: int, action_dim: int, hidden=(256, 256),
                 activation: str = "silu", time_features: int = 0, seed: int = 0,
                 params: np.ndarray | None = None):
        self.state_dim = int(state_dim)
        self.action_dim = int(action_dim)
        self.net = Approximator(
            inputs=(("state", self.state_dim), ("action", self.action_dim), ("time", 1)),
            hidden=tuple(hidden),
            out_dim=self.action_dim,
            activation=activation,
            time_features=time_features,
            seed=seed,
            params=params,
        )

    @property
    def params(self) -> np.ndarray:
        return self.net.params

    @params.setter
    def params(self, value: np.ndarray) -> None:
        self.net.params = np.asarray(value, dtype=np.float64)

    def velocity(self, states, actions, t, params: np.ndarray | None = None) -> np.ndarray:
        states = np.asarray(states, dtype=np.float64)
        actions = np.asarray(actions, dtype=np.float64)
        n = actions.shape[0] if actions.ndim == 2 else 1
        t_col = _time_column(t, n)
        return self.net.forward(
            {"state": states, "action": actions, "time": t_col}, params=params
        )

    def copy(self) -> "FlowPolicy":
        return FlowPolicy(
            self.state_dim, self.action_dim,
            hidden=self.net.hidden, activation=self.net.activation,
            time_features=self.net.time_features, seed=self.net.seed,
            params=self.net.params.copy(),
        )


def _time_column(t, n: int) -> np.ndarray:
    t_arr = np.asarray(t, dtype=np.float64)
    if t_arr.ndim == 0:
        return np.full((n, 1), float(t_arr))
    return t_arr.reshape(n, 1)


def velocity_regression_grad(policy: FlowPolicy, states, a_t, t, targets):
    """Mean squared-L2 regression of the velocity field onto target vectors.

    Returns (loss, parameter gradient).  This is the CFM inner loss; callers
    choose the regression target (conditional velocity, or an oracle mean for
    the marginal-loss comparison).
    """
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    a_t = np.atleast_2d(np.asarray(a_t, dtype=np.float64))
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    n = a_t.shape[0]
    t_col = _time_column(t, n)
    inputs = {"state": states, "action": a_t, "time": t_col}
    u = policy.net.forward(inputs)
    diff = u - targets
    loss = float(np.mean(np.sum(diff * diff, axis=1)))
    dparams, _ = policy.net.backward(inputs, 2.0 * diff / n)
    return loss, dparams


def cfm_loss(policy: FlowPolicy, states, actions, rng: np.random.Generator):
    """Conditional flow-matching loss and its exact parameter gradient.

    Per sample: t ~ U(0,1), x0 ~ N(0,I), a_t on the linear path toward the
    dataset action; regression target is the conditional velocity x1 - x0.
    """
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
    if len(actions) == 0:
        raise InputShapeError("cfm_loss requires a non-empty batch")
    n, da = actions.shape
    t = rng.random(n)
    x0 = rng.standard_normal((n, da))
    path = sample_path(x0, actions, t)
    return velocity_regression_grad(policy, states, path.x_t, t, path.u_cond)


def generate_action(policy: FlowPolicy, state, grid: FlowTimeGrid,
                    rng: np.random.Generator, record_path: bool = False,
                    params: np.ndarray | None = None):
    """Integrate the velocity field from Gaussian noise to a final action.

    Accepts a single state (ds,) or a batch (n, ds); actions follow suit.
    With record_path, also returns the list of (a_tau, u_tau) pairs for
    tau = 0..T-1 (a_tau is the point *before* step tau).
    """
    state = np.asarray(state, dtype=np.float64)
    single = state.ndim == 1
    states = state.reshape(1, -1) if single else state
    n = states.shape[0]
    a = rng.standard_normal((n, policy.action_dim))
    path = [] if record_path else None
    for tau in range(grid.T):
        u = policy.velocity(states, a, grid.time_of(tau), params=params)
        if record_path:
            path.append((a.copy(), u.copy()))
        a = a + grid.dt * u
        if not np.all(np.isfinite(a)):
            raise GenerationDivergenceError(tau)
    if single:
        a = a[0]
        if record_path:
            path = [(p[0], u[0]) for p, u in path]
    return a, path
