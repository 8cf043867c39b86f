"""Traditional RL critics: expectile state-value regression and Bellman Q.

V fits the expectile of the target Q over dataset actions; Q regresses onto
r + gamma * (1 - terminal) * V(s') with the target treated as a constant.
Neither loss propagates into the other network's parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .approx import Approximator, TargetTracker
from .errors import ConfigError

DEFAULT_Q_HIDDEN = (256, 256, 256)
DEFAULT_V_HIDDEN = (256, 256, 256)


@dataclass
class CriticSet:
    q_net: Approximator
    q_target: TargetTracker
    v_net: Approximator
    expectile: float = 0.5
    gamma: float = 0.99
    q_net2: Approximator | None = None
    q_target2: TargetTracker | None = None

    def __post_init__(self):
        if not (0.0 < self.expectile < 1.0):
            raise ConfigError("expectile must lie in (0, 1)")
        if not (0.0 < self.gamma <= 1.0):
            raise ConfigError("discount factor must lie in (0, 1]")

    @property
    def twin(self) -> bool:
        return self.q_net2 is not None

    def update_targets(self) -> None:
        self.q_target.update(self.q_net.params)
        if self.twin:
            self.q_target2.update(self.q_net2.params)


def make_critics(state_dim: int, action_dim: int, q_hidden=DEFAULT_Q_HIDDEN,
                 v_hidden=DEFAULT_V_HIDDEN, expectile: float = 0.5,
                 gamma: float = 0.99, kappa: float = 0.005, twin: bool = False,
                 seed: int = 0) -> CriticSet:
    def q_approx(s):
        return Approximator(
            inputs=(("state", state_dim), ("action", action_dim)),
            hidden=tuple(q_hidden), out_dim=1, activation="relu", seed=s,
        )

    q_net = q_approx(seed)
    v_net = Approximator(
        inputs=(("state", state_dim),), hidden=tuple(v_hidden), out_dim=1,
        activation="relu", seed=seed + 1,
    )
    q_net2 = q_approx(seed + 2) if twin else None
    return CriticSet(
        q_net=q_net,
        q_target=TargetTracker(params=q_net.params.copy(), kappa=kappa),
        v_net=v_net,
        expectile=expectile,
        gamma=gamma,
        q_net2=q_net2,
        q_target2=TargetTracker(params=q_net2.params.copy(), kappa=kappa) if twin else None,
    )


def expectile_loss(y, tau: float):
    """Asymmetric squared loss |tau - 1(y<0)| * y^2, elementwise."""
    if not (0.0 < tau < 1.0):
        raise ConfigError("expectile must lie in (0, 1)")
    y = np.asarray(y, dtype=np.float64)
    w = np.abs(tau - (y < 0.0))
    out = w * y * y
    return float(out) if out.ndim == 0 else out


def q_value(critics: CriticSet, states, actions, use_target: bool = False):
    """Scalar critic value(s); the twin option takes the elementwise min."""
    inputs = {"state": states, "action": actions}
    p1 = critics.q_target.params if use_target else None
    q1 = critics.q_net.forward(inputs, params=p1)
    q1 = q1[..., 0] if q1.ndim == 2 else q1[0]
    if not critics.twin:
        return q1
    p2 = critics.q_target2.params if use_target else None
    q2 = critics.q_net2.forward(inputs, params=p2)
    q2 = q2[..., 0] if q2.ndim == 2 else q2[0]
    return np.minimum(q1, q2)


def state_value(critics: CriticSet, states):
    v = critics.v_net.forward({"state": states})
    return v[..., 0] if v.ndim == 2 else v[0]


def v_loss(critics: CriticSet, batch: dict):
    """Expectile regression of V(s) toward target-Q(s, a); grads to V only."""
    q_bar = q_value(critics, batch["state"], batch["action"], use_target=True)
    inputs = {"state": batch["state"]}
    v = critics.v_net.forward(inputs)[:, 0]
    y = v - q_bar
    w = np.abs(critics.expectile - (y < 0.0))
    loss = float(np.mean(w * y * y))
    upstream = (2.0 * w * y / len(y))[:, None]
    grad_v, _ = critics.v_net.backward(inputs, upstream)
    return loss, grad_v


def q_loss(critics: CriticSet, batch: dict, rng: np.random.Generator | None = None,
           conservative_weight: float = 0.0, conservative_samples: int = 4):
    """Squared Bellman regression of Q onto r + gamma * (1-terminal) * V(s').

    With conservative_weight > 0 the target is lowered by a scaled
    log-sum-exp of target-Q over random candidate actions (the alternate
    critic-target ablation).  Returns (loss, grad_q, grad_q2_or_None).
    """
    v_next = state_value(critics, batch["next_state"])
    target = batch["reward"] + critics.gamma * (1.0 - batch["terminal"]) * v_next
    if conservative_weight > 0.0:
        if rng is None:
            raise ConfigError("conservative penalty requires an rng")
        n = len(target)
        da = batch["action"].shape[1]
        samples = np.stack([
            q_value(critics, batch["state"], rng.standard_normal((n, da)), use_target=True)
            for _ in range(conservative_samples)
        ])
        lse = np.log(np.exp(samples - samples.max(axis=0)).sum(axis=0)) + samples.max(axis=0)
        target = target - conservative_weight * (lse - np.log(conservative_samples))

    def one_net(net):
        inputs = {"state": batch["state"], "action": batch["action"]}
        q = net.forward(inputs)[:, 0]
        err = q - target
        loss = float(np.mean(err * err))
        grad, _ = net.backward(inputs, (2.0 * err / len(err))[:, None])
        return loss, grad

    loss1, grad1 = one_net(critics.q_net)
    if not critics.twin:
        return loss1, grad1, None
    loss2, grad2 = one_net(critics.q_net2)
    return loss1 + loss2, grad1, grad2
