"""Direction-oriented decision flow.

Two flow critics score intermediate generation states: one conditioned on the
raw velocity (direction and magnitude), one on the unit direction only.  Both
regress toward the RL critic's value of the dataset action, and the policy
ascends their difference under an L2 behavior constraint.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .approx import Approximator
from .critic_rl import CriticSet, q_value
from .flowcore import FlowPolicy, normalize_velocity, sample_path

DEFAULT_FLOW_HIDDEN = (256, 256, 128, 128)


@dataclass
class DirFlowCritics:
    """Velocity-conditioned Q^f and direction-conditioned V^f."""

    qf_net: Approximator  # (state, action a_t, velocity, time) -> scalar
    vf_net: Approximator  # (state, action a_t, unit direction, time) -> scalar


def make_dir_critics(state_dim: int, action_dim: int,
                     hidden=DEFAULT_FLOW_HIDDEN, seed: int = 0) -> DirFlowCritics:
    def build(s, vel_name):
        return Approximator(
            inputs=(("state", state_dim), ("action", action_dim),
                    (vel_name, action_dim), ("time", 1)),
            hidden=tuple(hidden), out_dim=1, activation="relu", seed=s,
        )

    return DirFlowCritics(qf_net=build(seed, "velocity"),
                          vf_net=build(seed + 1, "direction"))


def _sample_flow_points(batch: dict, rng: np.random.Generator):
    """Draw (t, a_t) on linear paths toward the dataset actions."""
    actions = batch["action"]
    n, da = actions.shape
    t = rng.random(n)
    x0 = rng.standard_normal((n, da))
    path = sample_path(x0, actions, t)
    return t, path.x_t


def dir_critic_loss(critics: DirFlowCritics, policy: FlowPolicy,
                    rl_critics: CriticSet, batch: dict, rng: np.random.Generator):
    """Regress both flow critics toward Q(s, a) at path-sampled points.

    The target and the policy velocity are constants here; gradients reach
    only the flow-critic parameters.  Returns (losses, grad_qf, grad_vf).
    """
    states = batch["state"]
    t, a_t = _sample_flow_points(batch, rng)
    n = len(t)
    u = policy.velocity(states, a_t, t)
    u_hat, _ = normalize_velocity(u)
    target = q_value(rl_critics, states, batch["action"])

    t_col = t[:, None]
    qf_inputs = {"state": states, "action": a_t, "velocity": u, "time": t_col}
    vf_inputs = {"state": states, "action": a_t, "direction": u_hat, "time": t_col}

    qf = critics.qf_net.forward(qf_inputs)[:, 0]
    vf = critics.vf_net.forward(vf_inputs)[:, 0]
    err_q = qf - target
    err_v = vf - target
    loss_qf = float(np.mean(err_q * err_q))
    loss_vf = float(np.mean(err_v * err_v))
    grad_qf, _ = critics.qf_net.backward(qf_inputs, (2.0 * err_q / n)[:, None])
    grad_vf, _ = critics.vf_net.backward(vf_inputs, (2.0 * err_v / n)[:, None])
    return (loss_qf, loss_vf), grad_qf, grad_vf


def dir_policy_loss(policy: FlowPolicy, critics: DirFlowCritics,
                    behavior: FlowPolicy, rho: float, batch: dict,
                    rng: np.random.Generator):
    """Policy objective: -(Q^f - V^f) + rho * ||u - u_v||_2, averaged.

    Gradients flow through the policy velocity into both critic inputs (the
    direction input via the normalization Jacobian); critic and behavior
    parameters stay frozen.  Returns (loss, grad_theta, stats).
    """
    states = batch["state"]
    t, a_t = _sample_flow_points(batch, rng)
    n = len(t)
    t_col = t[:, None]

    pol_inputs = {"state": states, "action": a_t, "time": t_col}
    u = policy.net.forward(pol_inputs)
    u_hat, degenerate = normalize_velocity(u)
    u_v = behavior.velocity(states, a_t, t)

    qf_inputs = {"state": states, "action": a_t, "velocity": u, "time": t_col}
    vf_inputs = {"state": states, "action": a_t, "direction": u_hat, "time": t_col}
    qf = critics.qf_net.forward(qf_inputs)[:, 0]
    vf = critics.vf_net.forward(vf_inputs)[:, 0]

    diff = u - u_v
    div = np.linalg.norm(diff, axis=1)
    loss = float(np.mean(-(qf - vf) + rho * div))

    # d loss / d u, assembled term by term
    ones = np.full((n, 1), 1.0 / n)
    _, qf_in = critics.qf_net.backward(qf_inputs, -ones)
    du = qf_in["velocity"].copy()
    _, vf_in = critics.vf_net.backward(vf_inputs, ones)
    d_uhat = vf_in["direction"]
    norms = np.linalg.norm(u, axis=1)
    ok = ~degenerate
    # chain through u_hat = u / ||u||: J^T g = (g - (u_hat . g) u_hat) / ||u||
    proj = np.sum(u_hat[ok] * d_uhat[ok], axis=1, keepdims=True)
    du[ok] += (d_uhat[ok] - proj * u_hat[ok]) / norms[ok, None]
    if rho > 0.0:
        safe = div > 1e-12
        du[safe] += rho * diff[safe] / (div[safe, None] * n)

    grad_theta, _ = policy.net.backward(pol_inputs, du)
    stats = {
        "advantage_mag": float(np.mean(np.abs(qf - vf))),
        "mean_divergence": float(np.mean(div)),
        "degenerate": int(degenerate.sum()),
    }
    return loss, grad_theta, stats


def direction_alignment_report(velocity_fn, q_fn, states, action_dim, grid, rng,
                               fd_eps: float = 1e-4, grad_tol: float = 1e-10):
    """Cosine similarity between policy directions and the critic's action
    gradient along generated trajectories.

    ``velocity_fn(states, actions, t)`` and ``q_fn(states, actions)`` are
    callables so analytic critics can stand in for trained nets.  The action
    gradient comes from central finite differences.  Points where either the
    gradient or the velocity is degenerate are excluded and counted.
    """
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    n, _ = states.shape
    da = int(action_dim)
    per_tau = []
    all_cos = []
    degenerate_count = 0

    a = rng.standard_normal((n, da))
    for tau in range(grid.T):
        t = grid.time_of(tau)
        u = np.atleast_2d(velocity_fn(states, a, t))
        u_hat, u_degen = normalize_velocity(u)

        g = np.zeros((n, da))
        for j in range(da):
            e = np.zeros(da)
            e[j] = fd_eps
            g[:, j] = (np.asarray(q_fn(states, a + e)) - np.asarray(q_fn(states, a - e))) / (
                2.0 * fd_eps
            )
        gnorm = np.linalg.norm(g, axis=1)
        ok = (~u_degen) & (gnorm > grad_tol)
        degenerate_count += int((~ok).sum())
        cos = np.sum(u_hat[ok] * (g[ok] / gnorm[ok, None]), axis=1)
        all_cos.extend(cos.tolist())
        per_tau.append({
            "tau": tau,
            "count": int(ok.sum()),
            "mean": float(cos.mean()) if len(cos) else float("nan"),
            "q10": float(np.quantile(cos, 0.10)) if len(cos) else float("nan"),
            "q50": float(np.quantile(cos, 0.50)) if len(cos) else float("nan"),
            "q90": float(np.quantile(cos, 0.90)) if len(cos) else float("nan"),
        })
        a = a + grid.dt * u

    return {
        "per_tau": per_tau,
        "mean_cosine": float(np.mean(all_cos)) if all_cos else float("nan"),
        "degenerate": degenerate_count,
        "samples": len(all_cos),
    }
