"""Synthetic offline environments, dataset generation, and the on-disk format.

Two desk-scale environments:

* ``bandit`` — horizon-1, 2-D actions, a two-mode Gaussian reward surface
  whose modes have different peak values (1.0 vs 0.6).  The behavior mixture
  covers both modes, so imitation alone caps well below the best mode.
* ``pointmass`` — 30-step navigation on [-1,1]^2 toward a fixed goal with
  reward equal to negative distance, exercising multi-step Bellman backups.

Transitions carry the previous action of the same episode (zero vector at
episode start), which the divergence-variant flow critic conditions on.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DatasetParseError, SchemaError

BANDIT_REWARD_SCALE = 0.08
BANDIT_MODE2_PEAK = 0.6
POINTMASS_GOAL = np.array([0.8, 0.8])
POINTMASS_STEP_SIZE = 0.1
POINTMASS_HORIZON = 30
POINTMASS_GOAL_RADIUS = 0.05

# Mean episode returns of the reference policies (standard-normal random
# actions, and the scripted-optimal controller), 10^4 seeded episodes via
# compute_reference_returns; regenerated by tests within MC tolerance.
_REFERENCE_RETURNS = {
    "bandit": (0.04402368360417801, 1.0),
    "pointmass": (-38.13729403968192, -7.448077015146082),
}


@dataclass(frozen=True)
class EnvSpec:
    env_id: str
    state_dim: int
    action_dim: int
    horizon: int
    reward_desc: str
    r_random: float
    r_expert: float

    def __post_init__(self):
        if self.r_expert <= self.r_random:
            raise ConfigError("reference returns must satisfy R_expert > R_random")


@dataclass
class Transition:
    prev_action: np.ndarray
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    terminal: bool
    episode: int
    step: int


@dataclass
class Dataset:
    """Column-array transition store plus its manifest."""

    manifest: dict
    prev_action: np.ndarray
    state: np.ndarray
    action: np.ndarray
    reward: np.ndarray
    next_state: np.ndarray
    terminal: np.ndarray
    episode: np.ndarray
    step: np.ndarray

    def __len__(self) -> int:
        return len(self.reward)

    def transitions(self):
        for i in range(len(self)):
            yield Transition(
                prev_action=self.prev_action[i], state=self.state[i],
                action=self.action[i], reward=float(self.reward[i]),
                next_state=self.next_state[i], terminal=bool(self.terminal[i]),
                episode=int(self.episode[i]), step=int(self.step[i]),
            )

    def sample(self, rng: np.random.Generator, batch_size: int) -> dict:
        idx = rng.integers(0, len(self), size=batch_size)
        return {
            "prev_action": self.prev_action[idx],
            "state": self.state[idx],
            "action": self.action[idx],
            "reward": self.reward[idx],
            "next_state": self.next_state[idx],
            "terminal": self.terminal[idx].astype(np.float64),
        }


# -- bandit environment -------------------------------------------------------


def bandit_mode_centers(state) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(state, dtype=np.float64)
    return np.array([0.6, 0.6]) + 0.2 * s, np.array([-0.6, -0.6]) + 0.2 * s


def bandit_reward(state, action) -> np.ndarray:
    """max of the two mode Gaussians; the dominant mode peaks at 1.0."""
    s = np.atleast_2d(np.asarray(state, dtype=np.float64))
    a = np.atleast_2d(np.asarray(action, dtype=np.float64))
    m1, m2 = bandit_mode_centers(s)
    d1 = np.sum((a - m1) ** 2, axis=1)
    d2 = np.sum((a - m2) ** 2, axis=1)
    r = np.maximum(
        np.exp(-d1 / BANDIT_REWARD_SCALE),
        BANDIT_MODE2_PEAK * np.exp(-d2 / BANDIT_REWARD_SCALE),
    )
    return r if np.asarray(state).ndim == 2 else float(r[0])


def mode_cluster_counts(states, actions, radius: float = 0.3) -> tuple[int, int]:
    """Count actions within ``radius`` of their state's nearest mode center."""
    s = np.atleast_2d(np.asarray(states, dtype=np.float64))
    a = np.atleast_2d(np.asarray(actions, dtype=np.float64))
    m1, m2 = bandit_mode_centers(s)
    d1 = np.linalg.norm(a - m1, axis=1)
    d2 = np.linalg.norm(a - m2, axis=1)
    in1 = (d1 <= radius) & (d1 <= d2)
    in2 = (d2 <= radius) & (d2 < d1)
    return int(in1.sum()), int(in2.sum())


# -- pointmass environment -----------------------------------------------------


def pointmass_step(state, action) -> tuple[np.ndarray, float, bool]:
    """Clipped kinematic step; reward is negative distance to the goal.

    Returns (next_state, reward, reached_goal).  Episode truncation at the
    horizon is the rollout loop's concern.
    """
    s = np.asarray(state, dtype=np.float64)
    a = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
    s_next = np.clip(s + POINTMASS_STEP_SIZE * a, -1.0, 1.0)
    dist = float(np.linalg.norm(s_next - POINTMASS_GOAL))
    return s_next, -dist, dist < POINTMASS_GOAL_RADIUS


def scripted_optimal_action(state) -> np.ndarray:
    """Full-speed straight-line controller toward the goal."""
    direction = POINTMASS_GOAL - np.asarray(state, dtype=np.float64)
    return np.clip(direction / POINTMASS_STEP_SIZE, -1.0, 1.0)


class DetourController:
    """Mediocre controller: goes via a corner waypoint before the goal."""

    waypoint = np.array([0.8, -0.8])

    def __init__(self):
        self.phase = 0

    def action(self, state) -> np.ndarray:
        s = np.asarray(state, dtype=np.float64)
        if self.phase == 0 and np.linalg.norm(s - self.waypoint) < 0.15:
            self.phase = 1
        target = self.waypoint if self.phase == 0 else POINTMASS_GOAL
        return np.clip((target - s) / POINTMASS_STEP_SIZE, -1.0, 1.0)


# -- environment registry ------------------------------------------------------

ENV_SPECS = {
    "bandit": EnvSpec(
        env_id="bandit", state_dim=2, action_dim=2, horizon=1,
        reward_desc="max of two Gaussian modes, peaks 1.0 and 0.6, width 0.08",
        r_random=_REFERENCE_RETURNS["bandit"][0],
        r_expert=_REFERENCE_RETURNS["bandit"][1],
    ),
    "pointmass": EnvSpec(
        env_id="pointmass", state_dim=2, action_dim=2, horizon=POINTMASS_HORIZON,
        reward_desc="negative distance to goal (0.8, 0.8), 30-step horizon",
        r_random=_REFERENCE_RETURNS["pointmass"][0],
        r_expert=_REFERENCE_RETURNS["pointmass"][1],
    ),
}

DEFAULT_MIXTURES = {
    "bandit": {"mode1": 0.45, "mode2": 0.45, "uniform": 0.10, "sigma": 0.1},
    "pointmass": {"optimal": 0.5, "mediocre": 0.5, "noise_sigma": 0.2},
}


def get_env_spec(env_id: str) -> EnvSpec:
    if env_id not in ENV_SPECS:
        raise ConfigError(f"unknown environment '{env_id}'")
    return ENV_SPECS[env_id]


def _episode_rngs(seed: int, n: int) -> list[np.random.Generator]:
    return [np.random.default_rng(c) for c in np.random.SeedSequence(seed).spawn(n)]


def _bandit_episode(rng: np.random.Generator, mixture: dict, episode: int) -> list[Transition]:
    s = rng.uniform(-1.0, 1.0, size=2)
    m1, m2 = bandit_mode_centers(s)
    u = rng.random()
    if u < mixture["mode1"]:
        a = m1 + mixture["sigma"] * rng.standard_normal(2)
    elif u < mixture["mode1"] + mixture["mode2"]:
        a = m2 + mixture["sigma"] * rng.standard_normal(2)
    else:
        a = rng.uniform(-1.0, 1.0, size=2)
    r = bandit_reward(s, a)
    return [Transition(
        prev_action=np.zeros(2), state=s, action=a, reward=r,
        next_state=s.copy(), terminal=True, episode=episode, step=0,
    )]


def _pointmass_episode(rng: np.random.Generator, mixture: dict, episode: int) -> list[Transition]:
    s = rng.uniform(-1.0, 1.0, size=2)
    use_optimal = rng.random() < mixture["optimal"]
    detour = DetourController()
    prev_a = np.zeros(2)
    out = []
    for step in range(POINTMASS_HORIZON):
        if use_optimal:
            a = scripted_optimal_action(s) + mixture["noise_sigma"] * rng.standard_normal(2)
        else:
            a = detour.action(s)
        s_next, r, reached = pointmass_step(s, a)
        terminal = reached or step == POINTMASS_HORIZON - 1
        out.append(Transition(
            prev_action=prev_a, state=s, action=a, reward=r,
            next_state=s_next, terminal=terminal, episode=episode, step=step,
        ))
        if terminal:
            break
        prev_a = a
        s = s_next
    return out


def _validate_mixture(env_id: str, mixture: dict) -> dict:
    defaults = DEFAULT_MIXTURES[env_id]
    mix = dict(defaults)
    mix.update(mixture or {})
    weight_keys = [k for k in defaults if not k.startswith(("sigma", "noise"))]
    total = sum(mix[k] for k in weight_keys)
    if abs(total - 1.0) > 1e-9:
        raise ConfigError(f"mixture weights {weight_keys} sum to {total}, expected 1")
    if any(mix[k] < 0 for k in weight_keys):
        raise ConfigError("mixture weights must be non-negative")
    return mix


def _columns(transitions: list[Transition], spec: EnvSpec) -> dict:
    n = len(transitions)
    ds, da = spec.state_dim, spec.action_dim
    cols = {
        "prev_action": np.zeros((n, da)), "state": np.zeros((n, ds)),
        "action": np.zeros((n, da)), "reward": np.zeros(n),
        "next_state": np.zeros((n, ds)), "terminal": np.zeros(n, dtype=bool),
        "episode": np.zeros(n, dtype=np.int64), "step": np.zeros(n, dtype=np.int64),
    }
    for i, tr in enumerate(transitions):
        cols["prev_action"][i] = tr.prev_action
        cols["state"][i] = tr.state
        cols["action"][i] = tr.action
        cols["reward"][i] = tr.reward
        cols["next_state"][i] = tr.next_state
        cols["terminal"][i] = tr.terminal
        cols["episode"][i] = tr.episode
        cols["step"][i] = tr.step
    return cols


def gen_dataset(env_id: str, mixture: dict | None = None, n_episodes: int = 1000,
                seed: int = 0) -> Dataset:
    """Generate an offline dataset; bitwise-deterministic given the seed.

    Episodes use independent rng streams split from the master seed, so they
    could be produced concurrently and merged in episode order.
    """
    spec = get_env_spec(env_id)
    mix = _validate_mixture(env_id, mixture)
    gen = _bandit_episode if env_id == "bandit" else _pointmass_episode
    transitions: list[Transition] = []
    for episode, rng in enumerate(_episode_rngs(seed, n_episodes)):
        transitions.extend(gen(rng, mix, episode))
    cols = _columns(transitions, spec)
    manifest = {
        "env": env_id,
        "state_dim": spec.state_dim,
        "action_dim": spec.action_dim,
        "episodes": n_episodes,
        "transitions": len(transitions),
        "reward_min": float(cols["reward"].min()) if transitions else 0.0,
        "reward_max": float(cols["reward"].max()) if transitions else 0.0,
        "reward_mean": float(cols["reward"].mean()) if transitions else 0.0,
        "seed": seed,
        "mixture": mix,
    }
    ds = Dataset(manifest=manifest, **cols)
    _validate_dataset(ds)
    return ds


def _validate_dataset(ds: Dataset) -> None:
    man = ds.manifest
    n = len(ds)
    if n != man["transitions"]:
        raise SchemaError(f"manifest declares {man['transitions']} transitions, found {n}")
    if n == 0:
        return
    if ds.state.shape[1] != man["state_dim"] or ds.action.shape[1] != man["action_dim"]:
        raise SchemaError(
            f"manifest dims (state {man['state_dim']}, action {man['action_dim']}) "
            f"disagree with data (state {ds.state.shape[1]}, action {ds.action.shape[1]})"
        )
    rmin, rmax = float(ds.reward.min()), float(ds.reward.max())
    if not (np.isclose(rmin, man["reward_min"]) and np.isclose(rmax, man["reward_max"])):
        raise SchemaError(
            f"manifest reward extrema ({man['reward_min']}, {man['reward_max']}) "
            f"disagree with data ({rmin}, {rmax})"
        )
    # prev_action chaining within each episode
    for i in range(1, n):
        if ds.episode[i] == ds.episode[i - 1]:
            if ds.step[i] != ds.step[i - 1] + 1:
                raise SchemaError(f"non-contiguous step index at row {i}")
            if not np.array_equal(ds.prev_action[i], ds.action[i - 1]):
                raise SchemaError(f"prev_action chain broken at row {i}")
        elif ds.step[i] != 0:
            raise SchemaError(f"episode {int(ds.episode[i])} does not start at step 0")


# -- on-disk format: JSON Lines, manifest first --------------------------------


def save_dataset(ds: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(ds.manifest, sort_keys=True) + "\n")
        for tr in ds.transitions():
            row = {
                "prev_action": list(tr.prev_action), "state": list(tr.state),
                "action": list(tr.action), "reward": tr.reward,
                "next_state": list(tr.next_state), "terminal": tr.terminal,
                "episode": tr.episode, "step": tr.step,
            }
            f.write(json.dumps(row, sort_keys=True) + "\n")


_ROW_KEYS = ("prev_action", "state", "action", "reward", "next_state",
             "terminal", "episode", "step")


def load_dataset(path) -> Dataset:
    with open(path, "r", encoding="utf-8") as f:
        first = f.readline()
        if not first.strip():
            raise DatasetParseError(1, "missing manifest line")
        try:
            manifest = json.loads(first)
        except json.JSONDecodeError as e:
            raise DatasetParseError(1, f"manifest is not valid JSON: {e}") from e
        rows = []
        line_no = 1
        for line in f:
            line_no += 1
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetParseError(line_no, f"invalid JSON: {e}") from e
            missing = [k for k in _ROW_KEYS if k not in row]
            if missing:
                raise DatasetParseError(line_no, f"missing keys {missing}")
            rows.append(row)
    expected = manifest.get("transitions")
    if expected is not None and len(rows) != expected:
        raise DatasetParseError(
            line_no + 1, f"expected {expected} transitions, file holds {len(rows)}"
        )
    transitions = [
        Transition(
            prev_action=np.asarray(r["prev_action"], dtype=np.float64),
            state=np.asarray(r["state"], dtype=np.float64),
            action=np.asarray(r["action"], dtype=np.float64),
            reward=float(r["reward"]),
            next_state=np.asarray(r["next_state"], dtype=np.float64),
            terminal=bool(r["terminal"]),
            episode=int(r["episode"]),
            step=int(r["step"]),
        )
        for r in rows
    ]
    if transitions:
        dims = {len(t.state) for t in transitions} | {len(t.next_state) for t in transitions}
        adims = {len(t.action) for t in transitions} | {len(t.prev_action) for t in transitions}
        if dims != {manifest["state_dim"]} or adims != {manifest["action_dim"]}:
            raise SchemaError(
                f"manifest dims (state {manifest['state_dim']}, action "
                f"{manifest['action_dim']}) disagree with file contents"
            )
    spec_like = EnvSpec(
        env_id=manifest["env"], state_dim=manifest["state_dim"],
        action_dim=manifest["action_dim"], horizon=1, reward_desc="", r_random=0.0,
        r_expert=1.0,
    )
    ds = Dataset(manifest=manifest, **_columns(transitions, spec_like))
    _validate_dataset(ds)
    return ds


# -- reference returns ----------------------------------------------------------


def compute_reference_returns(env_id: str, episodes: int = 10_000,
                              seed: int = 20240601) -> tuple[float, float]:
    """Mean returns of the random policy (a ~ N(0,I)) and the scripted expert."""
    get_env_spec(env_id)
    rngs = _episode_rngs(seed, episodes)
    random_total = 0.0
    expert_total = 0.0
    for rng in rngs:
        if env_id == "bandit":
            s = rng.uniform(-1.0, 1.0, size=2)
            random_total += bandit_reward(s, rng.standard_normal(2))
            expert_total += bandit_reward(s, bandit_mode_centers(s)[0])
        else:
            s0 = rng.uniform(-1.0, 1.0, size=2)
            s = s0.copy()
            for step in range(POINTMASS_HORIZON):
                s, r, reached = pointmass_step(s, rng.standard_normal(2))
                random_total += r
                if reached:
                    break
            s = s0.copy()
            for step in range(POINTMASS_HORIZON):
                s, r, reached = pointmass_step(s, scripted_optimal_action(s))
                expert_total += r
                if reached:
                    break
    return random_total / episodes, expert_total / episodes
