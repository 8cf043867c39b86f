"""Training orchestration: behavior pretraining, the main loop, ablations.

Each main-loop iteration performs, in order: one state-value update, one
Bellman Q update, a target-network update, the variant's flow-critic
update(s), then one policy update.  Everything is deterministic given the
config seed; checkpoints carry optimizer and rng state so a resumed run
reproduces the uninterrupted one.
"""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import df_dir, df_div
from .approx import AdamState, adam_step, load_checkpoint, save_checkpoint
from .critic_rl import CriticSet, make_critics, q_loss, v_loss
from .dataset import Dataset, get_env_spec, load_dataset
from .errors import ConfigError, TrainingDivergenceError
from .flowcore import FlowPolicy, FlowTimeGrid, cfm_loss

VARIANTS = ("dir", "div", "behavior-only")

METRICS_COLUMNS = (
    "iteration", "cfm", "v", "q", "flow_critic", "policy",
    "advantage", "divergence", "eval_return",
)


@dataclass
class TrainConfig:
    variant: str = "dir"
    env: str = "bandit"
    dataset_path: str = ""
    seed: int = 0
    iterations: int = 20_000
    batch_size: int = 256
    flow_steps: int = 10
    rho: float = 1.0
    gamma: float = 0.99
    expectile: float = 0.5
    kappa: float = 0.005
    lr: float = 3e-4
    pretrain_iterations: int = 5_000
    policy_hidden: tuple = (256, 256)
    q_hidden: tuple = (256, 256, 256)
    v_hidden: tuple = (256, 256, 256)
    flow_q_hidden: tuple = (256, 256, 128, 128)
    flow_v_hidden: tuple = (256, 256, 128, 128)
    div_v_hidden: tuple = (256, 256, 256)
    time_features: int = 0
    twin_q: bool = False
    no_prev_action: bool = False
    no_flow_mdp: bool = False
    alt_q: bool = False
    alt_q_weight: float = 0.1
    alt_q_samples: int = 4
    eval_every: int = 1000
    eval_episodes: int = 50
    checkpoint_every: int = 5000
    behavior_path: str = ""
    checkpoint_path: str = ""
    metrics_path: str = ""
    resume_from: str = ""

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got '{self.variant}'")
        if self.flow_steps < 1:
            raise ConfigError("flow_steps (T) must be >= 1")
        if self.rho < 0.0:
            raise ConfigError("rho must be >= 0")
        if not (0.0 < self.gamma <= 1.0):
            raise ConfigError("gamma must lie in (0, 1]")
        if self.no_prev_action and self.effective_variant() != "div":
            raise ConfigError("no_prev_action is only valid with variant=div")
        get_env_spec(self.env)
        for name in ("policy_hidden", "q_hidden", "v_hidden", "flow_q_hidden",
                     "flow_v_hidden", "div_v_hidden"):
            setattr(self, name, tuple(getattr(self, name)))

    def effective_variant(self) -> str:
        return "behavior-only" if self.no_flow_mdp else self.variant

    @classmethod
    def from_file(cls, path, overrides: dict | None = None) -> "TrainConfig":
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        raw.update(overrides or {})
        return cls(**raw)

    def to_file(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(asdict(self), f, indent=2, sort_keys=True)


@dataclass
class MetricsRow:
    iteration: int
    cfm: float | None = None
    v: float | None = None
    q: float | None = None
    flow_critic: float | None = None
    policy: float | None = None
    advantage: float | None = None
    divergence: float | None = None
    eval_return: float | None = None
    wall_clock: float = 0.0

    def csv_values(self) -> list:
        # wall_clock stays out of the file so identical runs match bitwise
        out = []
        for name in METRICS_COLUMNS:
            val = getattr(self, name)
            out.append("" if val is None else repr(val) if isinstance(val, float) else val)
        return out

    def finite(self) -> bool:
        vals = [getattr(self, n) for n in METRICS_COLUMNS[1:]]
        return all(v is None or np.isfinite(v) for v in vals)


def write_metrics(path, rows: list[MetricsRow]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f)
        w.writerow(METRICS_COLUMNS)
        for row in rows:
            w.writerow(row.csv_values())


@dataclass
class TrainState:
    """Everything the loop mutates, bundled for checkpointing."""

    policy: FlowPolicy
    behavior: FlowPolicy
    critics: CriticSet
    flow_dir: df_dir.DirFlowCritics | None
    flow_div: df_div.DivFlowCritic | None
    optimizers: dict[str, AdamState]
    rng: np.random.Generator
    iteration: int = 0


def _policy_seed_offsets(seed: int) -> dict:
    return {"q": seed * 101 + 1, "v": seed * 101 + 2, "qf": seed * 101 + 3,
            "vf": seed * 101 + 4, "div": seed * 101 + 5, "policy": seed * 101 + 6,
            "behavior": seed * 101 + 7}


def build_state(config: TrainConfig, behavior: FlowPolicy | None) -> TrainState:
    spec = get_env_spec(config.env)
    offs = _policy_seed_offsets(config.seed)
    variant = config.effective_variant()

    if behavior is None:
        behavior = FlowPolicy(spec.state_dim, spec.action_dim, hidden=config.policy_hidden,
                              time_features=config.time_features, seed=offs["behavior"])
    policy = FlowPolicy(spec.state_dim, spec.action_dim, hidden=config.policy_hidden,
                        time_features=config.time_features, seed=offs["policy"])
    if variant != "behavior-only" and behavior.net.params.shape == policy.net.params.shape:
        # start the trainable policy from the behavior solution it is
        # constrained toward
        policy.params = behavior.net.params.copy()

    critics = make_critics(
        spec.state_dim, spec.action_dim, q_hidden=config.q_hidden,
        v_hidden=config.v_hidden, expectile=config.expectile, gamma=config.gamma,
        kappa=config.kappa, twin=config.twin_q, seed=offs["q"],
    )
    flow_dir = flow_div = None
    opts = {
        "policy": AdamState.for_params(policy.net.params, lr=config.lr),
        "q": AdamState.for_params(critics.q_net.params, lr=config.lr),
        "v": AdamState.for_params(critics.v_net.params, lr=config.lr),
    }
    if config.twin_q:
        opts["q2"] = AdamState.for_params(critics.q_net2.params, lr=config.lr)
    if variant == "dir":
        flow_dir = df_dir.make_dir_critics(spec.state_dim, spec.action_dim,
                                           hidden=config.flow_q_hidden, seed=offs["qf"])
        opts["qf"] = AdamState.for_params(flow_dir.qf_net.params, lr=config.lr)
        opts["vf"] = AdamState.for_params(flow_dir.vf_net.params, lr=config.lr)
    elif variant == "div":
        flow_div = df_div.make_div_critic(
            spec.state_dim, spec.action_dim, hidden=config.div_v_hidden,
            use_prev_action=not config.no_prev_action, seed=offs["div"],
        )
        opts["div"] = AdamState.for_params(flow_div.vf_net.params, lr=config.lr)

    rng = np.random.default_rng(np.random.SeedSequence(entropy=(config.seed, 0xD5)))
    return TrainState(policy=policy, behavior=behavior, critics=critics,
                      flow_dir=flow_dir, flow_div=flow_div, optimizers=opts, rng=rng)


# -- behavior pretraining ------------------------------------------------------


def pretrain_behavior(config: TrainConfig, ds: Dataset,
                      iterations: int | None = None) -> tuple[FlowPolicy, list[MetricsRow]]:
    """Fit a flow policy to the dataset by conditional flow matching, freeze it."""
    spec = get_env_spec(config.env)
    offs = _policy_seed_offsets(config.seed)
    policy = FlowPolicy(spec.state_dim, spec.action_dim, hidden=config.policy_hidden,
                        time_features=config.time_features, seed=offs["behavior"])
    opt = AdamState.for_params(policy.net.params, lr=config.lr)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(config.seed, 0xBE)))
    n_iter = config.pretrain_iterations if iterations is None else iterations
    rows = []
    start = time.perf_counter()
    for i in range(1, n_iter + 1):
        batch = ds.sample(rng, config.batch_size)
        loss, grad = cfm_loss(policy, batch["state"], batch["action"], rng)
        if not np.isfinite(loss):
            raise TrainingDivergenceError(f"behavior pretraining diverged at iteration {i}")
        adam_step(policy.net.params, grad, opt)
        rows.append(MetricsRow(iteration=i, cfm=loss,
                               wall_clock=time.perf_counter() - start))
    if config.behavior_path:
        save_policy(policy, config.behavior_path)
    return policy, rows


def save_policy(policy: FlowPolicy, path) -> None:
    save_checkpoint(path, {"policy": policy.net.params},
                    meta={"policy_arch": policy.net.arch(),
                          "state_dim": policy.state_dim,
                          "action_dim": policy.action_dim})


def load_policy(path) -> FlowPolicy:
    blocks, meta = load_checkpoint(path)
    arch = meta["policy_arch"]
    pol = FlowPolicy(
        state_dim=meta["state_dim"], action_dim=meta["action_dim"],
        hidden=tuple(arch["hidden"]), activation=arch["activation"],
        time_features=arch.get("time_features", 0), seed=arch.get("seed", 0),
        params=blocks["policy"],
    )
    return pol


# -- checkpoint/resume of the full training state -------------------------------


def _save_train_checkpoint(path, config: TrainConfig, state: TrainState) -> None:
    blocks = {
        "policy": state.policy.net.params,
        "behavior": state.behavior.net.params,
        "q": state.critics.q_net.params,
        "q_target": state.critics.q_target.params,
        "v": state.critics.v_net.params,
    }
    if state.critics.twin:
        blocks["q2"] = state.critics.q_net2.params
        blocks["q2_target"] = state.critics.q_target2.params
    if state.flow_dir is not None:
        blocks["qf"] = state.flow_dir.qf_net.params
        blocks["vf"] = state.flow_dir.vf_net.params
    if state.flow_div is not None:
        blocks["div_vf"] = state.flow_div.vf_net.params
    for name, opt in state.optimizers.items():
        blocks[f"opt.{name}.m"] = opt.m
        blocks[f"opt.{name}.v"] = opt.v
    meta = {
        "iteration": state.iteration,
        "config": asdict(config),
        "opt_steps": {name: opt.step for name, opt in state.optimizers.items()},
        "rng_state": _jsonable_rng_state(state.rng),
        "policy_arch": state.policy.net.arch(),
        "behavior_arch": state.behavior.net.arch(),
        "state_dim": state.policy.state_dim,
        "action_dim": state.policy.action_dim,
    }
    save_checkpoint(path, blocks, meta=meta)


def _jsonable_rng_state(rng: np.random.Generator) -> dict:
    st = rng.bit_generator.state
    return json.loads(json.dumps(st, default=str))


def _restore_rng_state(raw: dict) -> np.random.Generator:
    rng = np.random.default_rng(0)
    state = dict(raw)
    inner = {k: int(v) for k, v in state["state"].items()}
    state["state"] = inner
    state["has_uint32"] = int(state["has_uint32"])
    state["uinteger"] = int(state["uinteger"])
    rng.bit_generator.state = state
    return rng


def _resume_state(path, config: TrainConfig) -> TrainState:
    blocks, meta = load_checkpoint(path)
    saved_cfg = TrainConfig(**{**meta["config"],
                               **{k: tuple(v) for k, v in meta["config"].items()
                                  if k.endswith("_hidden")}})
    state = build_state(replace(saved_cfg, resume_from=""), behavior=None)
    state.behavior.params = blocks["behavior"]
    state.policy.params = blocks["policy"]
    state.critics.q_net.params[:] = blocks["q"]
    state.critics.q_target.params[:] = blocks["q_target"]
    state.critics.v_net.params[:] = blocks["v"]
    if state.critics.twin:
        state.critics.q_net2.params[:] = blocks["q2"]
        state.critics.q_target2.params[:] = blocks["q2_target"]
    if state.flow_dir is not None:
        state.flow_dir.qf_net.params[:] = blocks["qf"]
        state.flow_dir.vf_net.params[:] = blocks["vf"]
    if state.flow_div is not None:
        state.flow_div.vf_net.params[:] = blocks["div_vf"]
    for name, opt in state.optimizers.items():
        opt.m[:] = blocks[f"opt.{name}.m"]
        opt.v[:] = blocks[f"opt.{name}.v"]
        opt.step = int(meta["opt_steps"][name])
    state.rng = _restore_rng_state(meta["rng_state"])
    state.iteration = int(meta["iteration"])
    return state


# -- the main loop ---------------------------------------------------------------


def train(config: TrainConfig, ds: Dataset | None = None,
          behavior: FlowPolicy | None = None, trace: list | None = None):
    """Run Algorithm-style training; returns (state, metrics rows).

    Writes the metrics CSV and checkpoint files when paths are configured.
    ``trace`` (if given) collects update names in execution order, for the
    call-sequence test.
    """
    from .evaluation import evaluate  # deferred: evaluation imports trainer types

    if ds is None:
        if not config.dataset_path:
            raise ConfigError("train requires a dataset (path or in-memory)")
        ds = load_dataset(config.dataset_path)
    if ds.manifest["env"] != config.env:
        raise ConfigError(
            f"dataset env '{ds.manifest['env']}' does not match config env '{config.env}'"
        )
    variant = config.effective_variant()

    if variant == "behavior-only":
        policy, rows = pretrain_behavior(config, ds, iterations=config.iterations)
        state = build_state(config, behavior=policy)
        state.policy = policy
        rows = _schedule_evals(config, state, rows)
        if config.metrics_path:
            write_metrics(config.metrics_path, rows)
        if config.checkpoint_path:
            _save_train_checkpoint(config.checkpoint_path, config, state)
        return state, rows

    if config.resume_from:
        state = _resume_state(config.resume_from, config)
    else:
        if behavior is None:
            if not config.behavior_path:
                raise ConfigError("variant requires a pretrained behavior checkpoint")
            behavior = load_policy(config.behavior_path)
        state = build_state(config, behavior=behavior)

    grid = FlowTimeGrid(config.flow_steps)
    rows: list[MetricsRow] = []
    start = time.perf_counter()

    while state.iteration < config.iterations:
        state.iteration += 1
        i = state.iteration
        batch = ds.sample(state.rng, config.batch_size)
        row = MetricsRow(iteration=i)

        loss_v, grad_v = v_loss(state.critics, batch)
        adam_step(state.critics.v_net.params, grad_v, state.optimizers["v"])
        _trace(trace, "v")

        loss_q, grad_q, grad_q2 = q_loss(
            state.critics, batch, rng=state.rng,
            conservative_weight=config.alt_q_weight if config.alt_q else 0.0,
            conservative_samples=config.alt_q_samples,
        )
        adam_step(state.critics.q_net.params, grad_q, state.optimizers["q"])
        if grad_q2 is not None:
            adam_step(state.critics.q_net2.params, grad_q2, state.optimizers["q2"])
        _trace(trace, "q")

        state.critics.update_targets()
        _trace(trace, "target")

        row.v, row.q = loss_v, loss_q

        if variant == "dir":
            (lqf, lvf), gqf, gvf = df_dir.dir_critic_loss(
                state.flow_dir, state.policy, state.critics, batch, state.rng)
            adam_step(state.flow_dir.qf_net.params, gqf, state.optimizers["qf"])
            adam_step(state.flow_dir.vf_net.params, gvf, state.optimizers["vf"])
            _trace(trace, "flow_critic")
            row.flow_critic = lqf + lvf

            lpol, gpol, stats = df_dir.dir_policy_loss(
                state.policy, state.flow_dir, state.behavior, config.rho, batch, state.rng)
            adam_step(state.policy.net.params, gpol, state.optimizers["policy"])
            _trace(trace, "policy")
            row.policy = lpol
            row.advantage = stats["advantage_mag"]
            row.divergence = stats["mean_divergence"]
        else:
            lvf, gvf, cstats = df_div.div_critic_loss(
                state.flow_div, state.policy, state.behavior, state.critics,
                batch, grid, state.rng)
            adam_step(state.flow_div.vf_net.params, gvf, state.optimizers["div"])
            _trace(trace, "flow_critic")
            row.flow_critic = lvf

            lpol, gpol, stats = df_div.div_policy_loss(
                state.policy, state.flow_div, state.behavior, batch, grid, state.rng)
            adam_step(state.policy.net.params, gpol, state.optimizers["policy"])
            _trace(trace, "policy")
            row.policy = lpol
            row.divergence = stats["mean_divergence"]

        if not row.finite():
            raise TrainingDivergenceError(f"non-finite loss at iteration {i}")

        if config.eval_every and i % config.eval_every == 0:
            report = evaluate(state.policy, config.env, config.eval_episodes,
                              seed=_eval_seed(config.seed, i), grid=grid)
            row.eval_return = report.mean_return

        row.wall_clock = time.perf_counter() - start
        rows.append(row)

        if config.checkpoint_every and i % config.checkpoint_every == 0 and config.checkpoint_path:
            _save_train_checkpoint(config.checkpoint_path, config, state)

    if config.checkpoint_path:
        _save_train_checkpoint(config.checkpoint_path, config, state)
    if config.metrics_path:
        write_metrics(config.metrics_path, rows)
    return state, rows


def _trace(trace, name):
    if trace is not None:
        trace.append(name)


def _eval_seed(seed: int, iteration: int) -> int:
    return (seed * 1_000_003 + iteration) % (2**31)


def _schedule_evals(config: TrainConfig, state: TrainState,
                    rows: list[MetricsRow]) -> list[MetricsRow]:
    """Fill eval_return on schedule for behavior-only runs."""
    from .evaluation import evaluate

    grid = FlowTimeGrid(config.flow_steps)
    if not config.eval_every:
        return rows
    for row in rows:
        if row.iteration % config.eval_every == 0:
            report = evaluate(state.policy, config.env, config.eval_episodes,
                              seed=_eval_seed(config.seed, row.iteration), grid=grid)
            row.eval_return = report.mean_return
    return rows


# -- ablation harness -------------------------------------------------------------


def ablate(configs: list[TrainConfig], ds: Dataset | None = None,
           behavior: FlowPolicy | None = None) -> list[dict]:
    """Train each config on the shared dataset and compare final returns."""
    from .evaluation import evaluate

    if len(configs) < 2:
        raise ConfigError("ablate needs at least two configs")
    head = configs[0]
    for c in configs[1:]:
        if (c.env, c.dataset_path, c.seed) != (head.env, head.dataset_path, head.seed):
            raise ConfigError("ablation configs must share env, dataset, and seed")

    results = []
    base_return = None
    for c in configs:
        state, rows = train(c, ds=ds, behavior=behavior)
        report = evaluate(state.policy, c.env, max(c.eval_episodes, 50),
                          seed=_eval_seed(c.seed, 0), grid=FlowTimeGrid(c.flow_steps))
        label = c.effective_variant()
        flags = [f for f in ("no_prev_action", "alt_q") if getattr(c, f)]
        if flags:
            label += "+" + "+".join(flags)
        entry = {
            "label": label,
            "mean_return": report.mean_return,
            "normalized_score": report.normalized_score,
        }
        if base_return is None:
            base_return = report.mean_return
            entry["delta_vs_first"] = 0.0
        else:
            entry["delta_vs_first"] = report.mean_return - base_return
        results.append(entry)
    return results


def format_ablation_table(results: list[dict]) -> str:
    out = io.StringIO()
    out.write(f"{'run':<32} {'mean_return':>12} {'norm_score':>11} {'delta':>9}\n")
    for r in results:
        out.write(f"{r['label']:<32} {r['mean_return']:>12.4f} "
                  f"{r['normalized_score']:>11.2f} {r['delta_vs_first']:>9.4f}\n")
    return out.getvalue()
