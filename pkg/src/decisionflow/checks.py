"""Runnable property suites behind the `check` CLI subcommand.

Each suite returns (name, passed, detail) triples.  The finite-difference
probe here is the independent oracle the gradient checks run against: a
central difference of the loss along a random parameter direction, compared
to the inner product of the analytic gradient with that direction.
"""

from __future__ import annotations

import numpy as np

from . import df_dir, df_div
from .approx import AdamState, adam_step
from .critic_rl import expectile_loss, make_critics, q_loss, q_value, v_loss
from .dataset import gen_dataset, load_dataset, save_dataset
from .errors import ConfigError, DatasetParseError
from .flowcore import (FlowPolicy, FlowTimeGrid, cfm_loss, euler_step,
                       generate_action, normalize_velocity, sample_path)


def fd_directional(f, x: np.ndarray, v: np.ndarray, eps: float = 1e-5) -> float:
    """Central finite difference of f along direction v at x."""
    return (f(x + eps * v) - f(x - eps * v)) / (2.0 * eps)


def gradient_probe_error(loss_and_grad, params: np.ndarray,
                         rng: np.random.Generator, eps: float = 1e-5) -> float:
    """Relative error between analytic and finite-difference directional
    derivatives along one random unit direction."""
    v = rng.standard_normal(params.shape)
    v /= np.linalg.norm(v)
    _, grad = loss_and_grad(params)
    analytic = float(grad @ v)
    numeric = fd_directional(lambda p: loss_and_grad(p)[0], params, v, eps)
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def run_gradient_probes(loss_and_grad, params, seed: int, probes: int = 100,
                        rtol: float = 1e-3) -> tuple[bool, float]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(probes):
        err = gradient_probe_error(loss_and_grad, params, rng)
        worst = max(worst, err)
    return worst <= rtol, worst


# -- fixtures shared by the suites ----------------------------------------------


def _tiny_setup(seed: int):
    """Small nets and a bandit mini-batch for fast loss probes."""
    rng = np.random.default_rng(seed)
    ds = gen_dataset("bandit", n_episodes=64, seed=seed)
    batch = ds.sample(rng, 16)
    policy = FlowPolicy(2, 2, hidden=(10, 10), seed=seed)
    behavior = FlowPolicy(2, 2, hidden=(10, 10), seed=seed + 1)
    critics = make_critics(2, 2, q_hidden=(12, 12), v_hidden=(12, 12), seed=seed + 2)
    dir_critics = df_dir.make_dir_critics(2, 2, hidden=(12, 12), seed=seed + 3)
    div_critic = df_div.make_div_critic(2, 2, hidden=(12, 12), seed=seed + 4)
    grid = FlowTimeGrid(5)
    return ds, batch, policy, behavior, critics, dir_critics, div_critic, grid


def run_gradcheck(seed: int, probes: int = 100) -> list[tuple[str, bool, str]]:
    _, batch, policy, behavior, critics, dir_critics, div_critic, grid = _tiny_setup(seed)
    results = []

    def check(name, fn, params):
        ok, worst = run_gradient_probes(fn, params, seed=seed + hash(name) % 1000,
                                        probes=probes)
        results.append((name, ok, f"worst relative error {worst:.2e} over {probes} probes"))

    def cfm(p):
        return cfm_loss(
            FlowPolicy(2, 2, hidden=(10, 10), seed=0, params=p),
            batch["state"], batch["action"], np.random.default_rng(seed + 11))

    check("cfm_loss dtheta", cfm, policy.net.params)

    def vl(p):
        c = make_critics(2, 2, q_hidden=(12, 12), v_hidden=(12, 12), seed=seed + 2)
        c.v_net.params = p
        return v_loss(c, batch)

    check("v_loss dphi", vl, critics.v_net.params)

    def ql(p):
        c = make_critics(2, 2, q_hidden=(12, 12), v_hidden=(12, 12), seed=seed + 2)
        c.q_net.params = p
        loss, grad, _ = q_loss(c, batch)
        return loss, grad

    check("q_loss dpsi", ql, critics.q_net.params)

    def dir_qf(p):
        c = df_dir.make_dir_critics(2, 2, hidden=(12, 12), seed=seed + 3)
        c.qf_net.params = p
        (lq, _), gq, _ = df_dir.dir_critic_loss(c, policy, critics, batch,
                                                np.random.default_rng(seed + 12))
        return lq, gq

    check("dir_critic_loss dPsi", dir_qf, dir_critics.qf_net.params)

    def dir_vf(p):
        c = df_dir.make_dir_critics(2, 2, hidden=(12, 12), seed=seed + 3)
        c.vf_net.params = p
        (_, lv), _, gv = df_dir.dir_critic_loss(c, policy, critics, batch,
                                                np.random.default_rng(seed + 12))
        return lv, gv

    check("dir_critic_loss dOmega", dir_vf, dir_critics.vf_net.params)

    def dir_pol(p):
        pol = FlowPolicy(2, 2, hidden=(10, 10), seed=0, params=p)
        loss, grad, _ = df_dir.dir_policy_loss(pol, dir_critics, behavior, 1.0,
                                               batch, np.random.default_rng(seed + 13))
        return loss, grad

    check("dir_policy_loss dtheta", dir_pol, policy.net.params)

    def div_cr(p):
        c = df_div.make_div_critic(2, 2, hidden=(12, 12), seed=seed + 4)
        c.vf_net.params = p
        loss, grad, _ = df_div.div_critic_loss(c, policy, behavior, critics, batch,
                                               grid, np.random.default_rng(seed + 14))
        return loss, grad

    check("div_critic_loss dchi", div_cr, div_critic.vf_net.params)

    def div_pol(p):
        pol = FlowPolicy(2, 2, hidden=(10, 10), seed=0, params=p)
        loss, grad, _ = df_div.div_policy_loss(pol, div_critic, behavior, batch,
                                               grid, np.random.default_rng(seed + 15))
        return loss, grad

    check("div_policy_loss dtheta", div_pol, policy.net.params)
    return results


def run_flowcore(seed: int) -> list[tuple[str, bool, str]]:
    rng = np.random.default_rng(seed)
    results = []

    x0 = rng.standard_normal((64, 3))
    x1 = rng.standard_normal((64, 3))
    p0 = sample_path(x0, x1, 0.0)
    p1 = sample_path(x0, x1, 1.0)
    ok = np.array_equal(p0.x_t, x0) and np.array_equal(p1.x_t, x1)
    results.append(("path boundary identities", ok, "x_0 at t=0, x_1 at t=1"))

    ok = np.allclose(euler_step(np.array([2.0]), np.array([4.0]), 0.1), [2.4])
    results.append(("euler step arithmetic", ok, "2.0 + 0.1*4.0 = 2.4"))

    policy = FlowPolicy(2, 2, hidden=(8, 8), seed=seed)
    grid = FlowTimeGrid(10)
    states = rng.uniform(-1, 1, (32, 2))
    a1, path = generate_action(policy, states, grid, np.random.default_rng(seed + 1),
                               record_path=True)
    a = path[0][0]
    exact = True
    for tau in range(grid.T):
        a_rec, u_rec = path[tau]
        u = policy.velocity(states, a_rec, grid.time_of(tau))
        exact = exact and np.array_equal(u, u_rec) and np.array_equal(a, a_rec)
        a = a + grid.dt * u
    exact = exact and np.array_equal(a, a1)
    results.append(("recorded path matches euler recursion", exact,
                    "a_{tau+1} = a_tau + dt*u at every step"))

    u = np.array([[3.0, 4.0], [0.0, 0.0]])
    unit, degen = normalize_velocity(u)
    ok = (np.allclose(unit[0], [0.6, 0.8]) and not degen[0]
          and np.array_equal(unit[1], [0.0, 0.0]) and bool(degen[1]))
    results.append(("velocity normalization and degeneracy flag", ok,
                    "[3,4] -> [0.6,0.8]; zero stays zero, flagged"))
    return results


def run_critic(seed: int) -> list[tuple[str, bool, str]]:
    rng = np.random.default_rng(seed)
    results = []

    y = rng.standard_normal(256)
    taus = rng.uniform(0.05, 0.95, 16)
    ok = all(
        np.allclose(expectile_loss(y, t), expectile_loss(-y, 1.0 - t)) for t in taus
    )
    ok = ok and expectile_loss(0.0, 0.3) == 0.0 and np.all(expectile_loss(y, 0.7) >= 0)
    results.append(("expectile identities", ok, "L(y,tau)=L(-y,1-tau); L(0)=0; L>=0"))

    ds = gen_dataset("bandit", n_episodes=64, seed=seed)
    batch = ds.sample(rng, 32)
    critics = make_critics(2, 2, q_hidden=(12, 12), v_hidden=(12, 12), seed=seed)
    mse = float(np.mean((critics.v_net.forward({"state": batch["state"]})[:, 0]
                         - q_value(critics, batch["state"], batch["action"],
                                   use_target=True)) ** 2))
    loss, _ = v_loss(critics, batch)
    ok = abs(loss - 0.5 * mse) < 1e-12
    results.append(("tau=0.5 halves the squared residual", ok,
                    f"v_loss {loss:.6e} vs mse/2 {0.5 * mse:.6e}"))

    q_before = critics.q_net.params.copy()
    v_before = critics.v_net.params.copy()
    _, grad_v = v_loss(critics, batch)
    _, grad_q, _ = q_loss(critics, batch)
    adam_step(critics.v_net.params, grad_v, AdamState.for_params(critics.v_net.params))
    q_untouched = np.array_equal(critics.q_net.params, q_before)
    v_changed = not np.array_equal(critics.v_net.params, v_before)
    v_snapshot = critics.v_net.params.copy()
    adam_step(critics.q_net.params, grad_q, AdamState.for_params(critics.q_net.params))
    v_untouched = np.array_equal(critics.v_net.params, v_snapshot)
    ok = q_untouched and v_changed and v_untouched
    results.append(("loss gradients stay in their own network", ok,
                    "v step left Q untouched and vice versa"))
    return results


def run_dir_props(seed: int) -> list[tuple[str, bool, str]]:
    rng = np.random.default_rng(seed)
    results = []

    u = rng.standard_normal((128, 3))
    scales = rng.uniform(0.1, 10.0, (128, 1))
    d1, _ = normalize_velocity(u)
    d2, _ = normalize_velocity(scales * u)
    ok = np.allclose(d1, d2, atol=1e-12)
    results.append(("direction invariant to velocity magnitude", ok,
                    "normalize(c*u) == normalize(u) for c>0"))

    grid = FlowTimeGrid(10)
    states = rng.uniform(-1, 1, (200, 2))

    def q_quad(s, a):
        c = 0.3 * np.asarray(s)
        d = np.asarray(a) - c
        return -np.sum(d * d, axis=1)

    def grad_policy(s, a, t):
        return -2.0 * (np.asarray(a) - 0.3 * np.asarray(s))

    rep = df_dir.direction_alignment_report(grad_policy, q_quad, states, 2, grid,
                                            np.random.default_rng(seed + 1))
    ok = abs(rep["mean_cosine"] - 1.0) < 1e-3
    results.append(("gradient-following policy aligns with critic gradient", ok,
                    f"mean cosine {rep['mean_cosine']:.6f}"))

    rnd_policy = FlowPolicy(2, 2, hidden=(16, 16), seed=seed + 2)
    rep_null = df_dir.direction_alignment_report(
        lambda s, a, t: rnd_policy.velocity(s, a, t), q_quad, states[:100], 2, grid,
        np.random.default_rng(seed + 3))
    ok = abs(rep_null["mean_cosine"]) <= 0.2
    results.append(("untrained policy shows no alignment", ok,
                    f"|mean cosine| = {abs(rep_null['mean_cosine']):.4f} <= 0.2"))
    return results


def run_div_props(seed: int) -> list[tuple[str, bool, str]]:
    rng = np.random.default_rng(seed)
    results = []
    ds, batch, policy, behavior, critics, _, _, grid = _tiny_setup(seed)

    # bitwise reproducibility of the Monte-Carlo target
    n, da = batch["action"].shape
    tau0 = np.random.default_rng(seed).integers(0, grid.T, n)
    a_t = sample_path(np.random.default_rng(seed + 1).standard_normal((n, da)),
                      batch["action"], tau0 * grid.dt).x_t
    r1 = df_div.rollout_flow(policy, behavior, critics, batch["state"], a_t, tau0, grid)
    r2 = df_div.rollout_flow(policy, behavior, critics, batch["state"], a_t, tau0, grid)
    ok = np.array_equal(df_div.mc_target(r1), df_div.mc_target(r2))
    results.append(("mc_target bitwise reproducible", ok, "same seed, same value"))

    # identical policies collapse the target to Q(s, a_1)
    twin = behavior.copy()
    r3 = df_div.rollout_flow(twin, behavior, critics, batch["state"], a_t, tau0, grid)
    ok = np.array_equal(df_div.mc_target(r3), r3.terminal_q)
    results.append(("u_theta == u_v collapses target to terminal Q", ok,
                    "all divergences zero"))

    # telescoping residual after a short fit on frozen policies
    critic = df_div.make_div_critic(2, 2, hidden=(32, 32), seed=seed + 5)
    opt = AdamState.for_params(critic.vf_net.params, lr=1e-3)
    fit_rng = np.random.default_rng(seed + 6)
    for _ in range(1500):
        b = ds.sample(fit_rng, 64)
        _, grad, _ = df_div.div_critic_loss(critic, policy, behavior, critics,
                                            b, grid, fit_rng)
        adam_step(critic.vf_net.params, grad, opt)
    test_rng = np.random.default_rng(seed + 7)
    b = ds.sample(test_rng, 256)
    resid = df_div.telescoping_residuals(critic, policy, behavior, b, grid, test_rng)
    fit_err = _critic_fit_errors(critic, policy, behavior, critics, b, grid,
                                 np.random.default_rng(seed + 8))
    bound = 2.0 * float(fit_err.mean()) + 1e-6
    ok = float(resid.mean()) <= bound
    results.append(("one-step telescoping identity within fit error", ok,
                    f"residual {resid.mean():.4f} vs bound {bound:.4f}"))
    return results


def _critic_fit_errors(critic, policy, behavior, critics, batch, grid, rng):
    """|V^f - g_hat| on a fresh sample of start points (held-out fit error)."""
    n, da = batch["action"].shape
    tau0 = rng.integers(0, grid.T, n)
    t = tau0 * grid.dt
    a_t = sample_path(rng.standard_normal((n, da)), batch["action"], t).x_t
    rollout = df_div.rollout_flow(policy, behavior, critics, batch["state"], a_t,
                                  tau0, grid)
    v = df_div.flow_value(critic, batch["prev_action"], batch["state"], a_t, t)
    return np.abs(v - df_div.mc_target(rollout))


def run_dataset(seed: int) -> list[tuple[str, bool, str]]:
    import os
    import tempfile

    results = []
    ds = gen_dataset("pointmass", n_episodes=40, seed=seed)
    chained = True
    for i in range(1, len(ds)):
        if ds.episode[i] == ds.episode[i - 1]:
            chained = chained and np.array_equal(ds.prev_action[i], ds.action[i - 1])
    results.append(("prev_action chaining", chained, f"{len(ds)} transitions"))

    bd = gen_dataset("bandit", n_episodes=200, seed=seed)
    ok = (bd.reward.min() >= 0.0 and bd.reward.max() <= 1.0
          and np.all(np.isfinite(ds.reward)) and ds.reward.max() <= 0.0)
    results.append(("reward ranges", ok, "bandit in [0,1]; pointmass finite, <= 0"))

    again = gen_dataset("bandit", n_episodes=200, seed=seed)
    ok = (np.array_equal(bd.action, again.action)
          and np.array_equal(bd.reward, again.reward))
    results.append(("generation bitwise reproducible", ok, "same seed twice"))

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "ds.jsonl")
        save_dataset(bd, path)
        back = load_dataset(path)
        ok = (np.array_equal(bd.action, back.action)
              and np.array_equal(bd.state, back.state)
              and np.array_equal(bd.reward, back.reward)
              and np.array_equal(bd.prev_action, back.prev_action))
        results.append(("round-trip lossless", ok, path))

        with open(path) as f:
            lines = f.readlines()
        with open(path, "w") as f:
            f.writelines(lines[:-10])
        try:
            load_dataset(path)
            results.append(("truncation raises parse error", False, "no error raised"))
        except DatasetParseError as e:
            results.append(("truncation raises parse error", True, str(e)))
    return results


SUITES = {
    "gradcheck": run_gradcheck,
    "flowcore": run_flowcore,
    "critic": run_critic,
    "dir-props": run_dir_props,
    "div-props": run_div_props,
    "dataset": run_dataset,
}


def run_suite(suite_id: str, seed: int = 0) -> list[tuple[str, bool, str]]:
    if suite_id not in SUITES:
        raise ConfigError(f"unknown suite '{suite_id}'; choose from {sorted(SUITES)}")
    return SUITES[suite_id](seed)
