"""Divergence-oriented decision flow.

The generation process is treated as an inner MDP whose per-step reward is
the negative L2 divergence between the trained and behavior velocity fields,
with the RL critic's value of the final action as terminal reward.  A single
flow value function fits Monte-Carlo returns of that MDP; the policy improves
through a one-step Euler rollout that keeps the gradient path into the critic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .approx import Approximator
from .critic_rl import CriticSet, q_value
from .errors import GenerationDivergenceError
from .flowcore import FlowPolicy, FlowTimeGrid, sample_path

DEFAULT_DIV_HIDDEN = (256, 256, 256)


@dataclass
class DivFlowCritic:
    """Flow value over (previous action, state, intermediate action, time).

    ``use_prev_action=False`` drops the previous-action segment (the ablation
    that measures its contribution).
    """

    vf_net: Approximator
    use_prev_action: bool = True


def make_div_critic(state_dim: int, action_dim: int, hidden=DEFAULT_DIV_HIDDEN,
                    use_prev_action: bool = True, seed: int = 0) -> DivFlowCritic:
    segments = [("prev_action", action_dim)] if use_prev_action else []
    segments += [("state", state_dim), ("action", action_dim), ("time", 1)]
    net = Approximator(inputs=tuple(segments), hidden=tuple(hidden), out_dim=1,
                       activation="relu", seed=seed)
    return DivFlowCritic(vf_net=net, use_prev_action=use_prev_action)


def _critic_inputs(critic: DivFlowCritic, prev_action, states, actions, t_col) -> dict:
    inputs = {"state": states, "action": actions, "time": t_col}
    if critic.use_prev_action:
        inputs["prev_action"] = prev_action
    return inputs


def flow_value(critic: DivFlowCritic, prev_action, states, actions, t) -> np.ndarray:
    n = np.atleast_2d(actions).shape[0]
    t_col = np.full((n, 1), float(t)) if np.ndim(t) == 0 else np.asarray(t, float).reshape(n, 1)
    out = critic.vf_net.forward(_critic_inputs(critic, prev_action, states, actions, t_col))
    return out[:, 0]


@dataclass
class FlowRollout:
    """Batched generation suffixes: per sample, the path from its start step
    to the final action, with per-step divergences and the terminal value."""

    start_tau: np.ndarray        # (n,) int
    actions: np.ndarray          # (T+1, n, da); rows before start_tau repeat a_t
    divergences: np.ndarray      # (T, n); zero before start_tau
    terminal_q: np.ndarray       # (n,)
    dropped: np.ndarray          # (n,) bool, non-finite generation


def rollout_flow(policy: FlowPolicy, behavior: FlowPolicy, rl_critics: CriticSet,
                 states, a_start, start_tau, grid: FlowTimeGrid,
                 policy_params: np.ndarray | None = None) -> FlowRollout:
    """Roll the policy from per-sample start steps to the final action.

    Sample i stays parked at its a_start until the global step counter
    reaches start_tau[i]; afterwards it advances by Euler steps while the
    divergence against the behavior field accumulates.  Non-finite samples
    are frozen and flagged instead of aborting the batch.
    """
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    a = np.atleast_2d(np.asarray(a_start, dtype=np.float64)).copy()
    start_tau = np.asarray(start_tau, dtype=np.int64)
    n, da = a.shape
    actions = np.zeros((grid.T + 1, n, da))
    divergences = np.zeros((grid.T, n))
    dropped = np.zeros(n, dtype=bool)

    actions[0] = a
    for tau in range(grid.T):
        active = (start_tau <= tau) & ~dropped
        if np.any(active):
            t = grid.time_of(tau)
            u_t = policy.velocity(states[active], a[active], t, params=policy_params)
            u_v = behavior.velocity(states[active], a[active], t)
            d = np.linalg.norm(u_t - u_v, axis=1)
            stepped = a[active] + grid.dt * u_t
            finite = np.isfinite(stepped).all(axis=1) & np.isfinite(d)
            idx = np.flatnonzero(active)
            bad = idx[~finite]
            dropped[bad] = True
            good = idx[finite]
            a[good] = stepped[finite]
            divergences[tau, good] = d[finite]
        actions[tau + 1] = a
    terminal_q = q_value(rl_critics, states, a)
    return FlowRollout(start_tau=start_tau, actions=actions,
                       divergences=divergences, terminal_q=terminal_q,
                       dropped=dropped)


def mc_target(rollout: FlowRollout) -> np.ndarray:
    """Monte-Carlo flow return: Q(s, a_1) minus the summed divergences."""
    return rollout.terminal_q - rollout.divergences.sum(axis=0)


def div_critic_loss(critic: DivFlowCritic, policy: FlowPolicy, behavior: FlowPolicy,
                    rl_critics: CriticSet, batch: dict, grid: FlowTimeGrid,
                    rng: np.random.Generator):
    """Squared regression of the flow value onto Monte-Carlo rollout returns.

    Start steps are drawn on the discrete grid (the return's divergence sum
    runs over integer steps); start points are path samples toward dataset
    actions; the continuation is rolled out by the current policy with no
    gradient.  Dropped (non-finite) samples are excluded and counted.
    Returns (loss, grad_chi, stats).
    """
    states = batch["state"]
    actions = batch["action"]
    n, da = actions.shape
    start_tau = rng.integers(0, grid.T, size=n)
    t = start_tau * grid.dt
    x0 = rng.standard_normal((n, da))
    a_t = sample_path(x0, actions, t).x_t

    rollout = rollout_flow(policy, behavior, rl_critics, states, a_t, start_tau, grid)
    g_hat = mc_target(rollout)
    keep = ~rollout.dropped
    m = int(keep.sum())
    if m == 0:
        return 0.0, np.zeros_like(critic.vf_net.params), {"dropped": n, "mean_divergence": 0.0}

    inputs = _critic_inputs(critic, batch["prev_action"][keep], states[keep],
                            a_t[keep], t[keep][:, None])
    v = critic.vf_net.forward(inputs)[:, 0]
    err = v - g_hat[keep]
    loss = float(np.mean(err * err))
    grad, _ = critic.vf_net.backward(inputs, (2.0 * err / m)[:, None])
    steps_used = np.maximum(grid.T - start_tau[keep], 1)
    stats = {
        "dropped": int(rollout.dropped.sum()),
        "mean_divergence": float(
            (rollout.divergences.sum(axis=0)[keep] / steps_used).mean()
        ),
    }
    return loss, grad, stats


def div_policy_loss(policy: FlowPolicy, critic: DivFlowCritic, behavior: FlowPolicy,
                    batch: dict, grid: FlowTimeGrid, rng: np.random.Generator):
    """Policy objective: ||u - u_v||_2 - V^f(prev_a, s, a_{t+dt}, t+dt).

    The one-step Euler point a_{t+dt} keeps the gradient path from the flow
    value into the policy; critic and behavior parameters are frozen.
    Returns (loss, grad_theta, stats).
    """
    states = batch["state"]
    actions = batch["action"]
    n, da = actions.shape
    start_tau = rng.integers(0, grid.T, size=n)
    t = start_tau * grid.dt
    x0 = rng.standard_normal((n, da))
    a_t = sample_path(x0, actions, t).x_t
    t_col = t[:, None]

    pol_inputs = {"state": states, "action": a_t, "time": t_col}
    u = policy.net.forward(pol_inputs)
    u_v = behavior.velocity(states, a_t, t)
    diff = u - u_v
    div = np.linalg.norm(diff, axis=1)

    a_next = a_t + grid.dt * u
    t_next = (t + grid.dt)[:, None]
    vf_inputs = _critic_inputs(critic, batch["prev_action"], states, a_next, t_next)
    vf = critic.vf_net.forward(vf_inputs)[:, 0]

    loss = float(np.mean(div - vf))

    du = np.zeros_like(u)
    safe = div > 1e-12
    du[safe] = diff[safe] / (div[safe, None] * n)
    _, vf_in = critic.vf_net.backward(vf_inputs, np.full((n, 1), -1.0 / n))
    du += grid.dt * vf_in["action"]

    grad_theta, _ = policy.net.backward(pol_inputs, du)
    stats = {"mean_divergence": float(np.mean(div)),
             "mean_flow_value": float(np.mean(vf))}
    return loss, grad_theta, stats


def telescoping_residuals(critic: DivFlowCritic, policy: FlowPolicy,
                          behavior: FlowPolicy, batch: dict, grid: FlowTimeGrid,
                          rng: np.random.Generator) -> np.ndarray:
    """|V^f(a_t, t) - (-d_t + V^f(a_{t+dt}, t+dt))| at path-sampled points.

    The one-step identity a fitted critic should satisfy along the policy's
    own steps; used by the property suite against the critic's fit error.
    """
    states = batch["state"]
    actions = batch["action"]
    n, da = actions.shape
    start_tau = rng.integers(0, grid.T, size=n)
    t = start_tau * grid.dt
    x0 = rng.standard_normal((n, da))
    a_t = sample_path(x0, actions, t).x_t

    u = policy.velocity(states, a_t, t)
    u_v = behavior.velocity(states, a_t, t)
    d = np.linalg.norm(u - u_v, axis=1)
    a_next = a_t + grid.dt * u

    v_here = flow_value(critic, batch["prev_action"], states, a_t, t)
    v_next = flow_value(critic, batch["prev_action"], states, a_next, t + grid.dt)
    return np.abs(v_here - (-d + v_next))


def terminal_fit_errors(critic: DivFlowCritic, policy: FlowPolicy,
                        behavior: FlowPolicy, rl_critics: CriticSet, batch: dict,
                        grid: FlowTimeGrid, rng: np.random.Generator) -> np.ndarray:
    """|V^f(., a_1, 1) - Q(s, a_1)| on policy-generated final actions."""
    states = batch["state"]
    n, da = batch["action"].shape
    x0 = rng.standard_normal((n, da))
    rollout = rollout_flow(policy, behavior, rl_critics, states, x0,
                           np.zeros(n, dtype=np.int64), grid)
    a_1 = rollout.actions[-1]
    v = flow_value(critic, batch["prev_action"], states, a_1, 1.0)
    return np.abs(v - rollout.terminal_q)
