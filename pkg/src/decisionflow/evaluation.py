"""Evaluation rollouts, normalized scoring, and trajectory diagnostics.

Episodes draw independent rng streams split from the evaluation seed, so
their returns do not depend on execution order.  A policy is either a
FlowPolicy (actions come from ODE generation) or a callable
``f(state, rng) -> action`` (scripted controllers, test stubs).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .critic_rl import CriticSet, q_value
from .dataset import (POINTMASS_HORIZON, bandit_reward, get_env_spec,
                      mode_cluster_counts, pointmass_step)
from .errors import ConfigError, SchemaError
from .flowcore import FlowPolicy, FlowTimeGrid, generate_action


def normalized_score(r: float, r_random: float, r_expert: float) -> float:
    """Affine rescaling of a raw return onto the 0-100 reference scale."""
    if r_expert == r_random:
        raise ValueError("reference returns are equal; normalized score undefined")
    return (r - r_random) / (r_expert - r_random) * 100.0


@dataclass
class EvalReport:
    env_id: str
    episodes: int
    mean_return: float
    std_return: float
    normalized_score: float
    episode_returns: list[float]
    per_tau_monotonicity: list[float] | None = None
    monotonicity_fraction: float | None = None
    alignment: dict | None = None
    mode_coverage: tuple[int, int] | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    def to_text(self) -> str:
        lines = [
            f"env:              {self.env_id}",
            f"episodes:         {self.episodes}",
            f"mean return:      {self.mean_return:.6f}",
            f"std return:       {self.std_return:.6f}",
            f"normalized score: {self.normalized_score:.4f}",
        ]
        if self.monotonicity_fraction is not None:
            lines.append(f"Q monotonicity:   {self.monotonicity_fraction:.4f}")
        if self.mode_coverage is not None:
            lines.append(f"mode coverage:    {self.mode_coverage[0]}/{self.mode_coverage[1]}")
        if self.alignment is not None:
            lines.append(f"mean dir cosine:  {self.alignment['mean_cosine']:.4f}")
        return "\n".join(lines)


def _act(policy, state, grid: FlowTimeGrid, rng: np.random.Generator):
    if isinstance(policy, FlowPolicy):
        action, _ = generate_action(policy, state, grid, rng)
        return action
    return np.asarray(policy(state, rng), dtype=np.float64)


def _episode_return(env_id: str, policy, grid, rng) -> tuple[float, list, list]:
    if env_id == "bandit":
        s = rng.uniform(-1.0, 1.0, size=2)
        a = _act(policy, s, grid, rng)
        return float(bandit_reward(s, a)), [s], [a]
    s = rng.uniform(-1.0, 1.0, size=2)
    total = 0.0
    states, actions = [], []
    for step in range(POINTMASS_HORIZON):
        a = _act(policy, s, grid, rng)
        states.append(s)
        actions.append(a)
        s, r, reached = pointmass_step(s, a)
        total += r
        if reached:
            break
    return total, states, actions


def evaluate(policy, env_id: str, episodes: int, seed: int,
             grid: FlowTimeGrid | None = None, critics: CriticSet | None = None,
             alignment: bool = False, monotonicity_rollouts: int = 500,
             monotonicity_tol: float = 1e-3) -> EvalReport:
    """Roll out the policy and aggregate an EvalReport; deterministic in seed."""
    spec = get_env_spec(env_id)
    if episodes < 1:
        raise ConfigError("episodes must be >= 1")
    if isinstance(policy, FlowPolicy):
        if policy.state_dim != spec.state_dim or policy.action_dim != spec.action_dim:
            raise SchemaError(
                f"policy dims (state {policy.state_dim}, action {policy.action_dim}) "
                f"do not match env '{env_id}' "
                f"(state {spec.state_dim}, action {spec.action_dim})"
            )
    grid = grid or FlowTimeGrid(10)

    streams = np.random.SeedSequence(seed).spawn(episodes + 2)
    returns = []
    ep_states, ep_actions = [], []
    for k in range(episodes):
        rng = np.random.default_rng(streams[k])
        ret, states, actions = _episode_return(env_id, policy, grid, rng)
        returns.append(ret)
        ep_states.extend(states)
        ep_actions.extend(actions)

    mean = float(np.mean(returns))
    report = EvalReport(
        env_id=env_id,
        episodes=episodes,
        mean_return=mean,
        std_return=float(np.std(returns)),
        normalized_score=normalized_score(mean, spec.r_random, spec.r_expert),
        episode_returns=[float(r) for r in returns],
    )
    if env_id == "bandit":
        report.mode_coverage = mode_cluster_counts(np.asarray(ep_states),
                                                   np.asarray(ep_actions))
    if critics is not None and isinstance(policy, FlowPolicy):
        mono_rng = np.random.default_rng(streams[episodes])
        per_tau, frac = q_monotonicity(
            policy, critics, env_id, grid, mono_rng,
            rollouts=monotonicity_rollouts, tol=monotonicity_tol,
        )
        report.per_tau_monotonicity = per_tau
        report.monotonicity_fraction = frac
        if alignment:
            from .df_dir import direction_alignment_report

            align_rng = np.random.default_rng(streams[episodes + 1])
            states = align_rng.uniform(-1.0, 1.0, size=(min(monotonicity_rollouts, 200),
                                                        spec.state_dim))
            report.alignment = direction_alignment_report(
                lambda s, a, t: policy.velocity(s, a, t),
                lambda s, a: q_value(critics, s, a),
                states, spec.action_dim, grid, align_rng,
            )
    return report


def q_monotonicity(policy: FlowPolicy, critics: CriticSet, env_id: str,
                   grid: FlowTimeGrid, rng: np.random.Generator,
                   rollouts: int = 500, tol: float = 1e-3):
    """Fraction of generation steps with non-decreasing critic value.

    Returns (per-step fractions, overall fraction) over fresh rollouts from
    uniformly drawn states.
    """
    spec = get_env_spec(env_id)
    states = rng.uniform(-1.0, 1.0, size=(rollouts, spec.state_dim))
    _, path = generate_action(policy, states, grid, rng, record_path=True)
    actions = [p[0] for p in path]          # a_0 .. a_{T-1}
    final = actions[-1] + grid.dt * path[-1][1]
    actions.append(final)
    qs = np.stack([q_value(critics, states, a) for a in actions])  # (T+1, n)
    ok = qs[1:] >= qs[:-1] - tol
    per_tau = [float(f) for f in ok.mean(axis=1)]
    return per_tau, float(ok.mean())
