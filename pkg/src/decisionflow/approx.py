"""Minimal differentiable function approximator with exact backprop.

An :class:`Approximator` is an MLP over a concatenation of named input
segments (e.g. state, action, time).  Parameters live in one flat float64
vector so the optimizer, target tracking, and checkpointing all operate on
plain arrays.  Forward/backward run through the kernel backend selected at
import (compiled extension or numpy fallback).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ConfigError, InputShapeError, SchemaError, TrainingDivergenceError

ACTIVATIONS = {"relu": kernels.ACT_RELU, "silu": kernels.ACT_SILU}

TIME_SEGMENT = "time"


def _as_batch(name: str, arr, dim: int) -> tuple[np.ndarray, bool]:
    a = np.asarray(arr, dtype=np.float64)
    if a.ndim == 1:
        if a.shape[0] != dim:
            raise InputShapeError(f"input '{name}' has dim {a.shape[0]}, expected {dim}")
        return a.reshape(1, dim), True
    if a.ndim == 2:
        if a.shape[1] != dim:
            raise InputShapeError(f"input '{name}' has dim {a.shape[1]}, expected {dim}")
        return a, False
    raise InputShapeError(f"input '{name}' must be 1-D or 2-D, got ndim={a.ndim}")


@dataclass
class Approximator:
    """Layered affine+nonlinear map with named input segments.

    ``inputs`` declares segment names and dims in concatenation order.
    ``time_features`` > 0 appends sin/cos pairs at doubling frequencies to the
    'time' segment (which must then be 1-D); 0 feeds the raw scalar.
    """

    inputs: tuple[tuple[str, int], ...]
    hidden: tuple[int, ...]
    out_dim: int
    activation: str = "relu"
    time_features: int = 0
    seed: int = 0
    params: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.inputs = tuple((str(n), int(d)) for n, d in self.inputs)
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation '{self.activation}'")
        if any(d <= 0 for _, d in self.inputs) or any(h <= 0 for h in self.hidden):
            raise ConfigError("layer widths and input dims must be positive")
        if self.time_features < 0:
            raise ConfigError("time_features must be >= 0")
        if self.time_features > 0:
            dims = dict(self.inputs)
            if dims.get(TIME_SEGMENT) != 1:
                raise ConfigError("time_features requires a 1-D 'time' segment")
        self._act_id = ACTIVATIONS[self.activation]
        self.sizes = [self._expanded_in_dim(), *self.hidden, int(self.out_dim)]
        if self.params is None:
            self.params = self.init_params(self.seed)
        else:
            self.params = np.asarray(self.params, dtype=np.float64)
            if self.params.shape != (self.n_params,):
                raise ConfigError(
                    f"parameter vector has length {self.params.size}, expected {self.n_params}"
                )

    def _expanded_in_dim(self) -> int:
        raw = sum(d for _, d in self.inputs)
        return raw + 2 * self.time_features

    @property
    def n_params(self) -> int:
        return kernels.param_count(self.sizes)

    def init_params(self, seed: int) -> np.ndarray:
        """Fan-in scaled uniform init, deterministic given the seed."""
        rng = np.random.default_rng(seed)
        chunks = []
        for l in range(len(self.sizes) - 1):
            fi, fo = self.sizes[l], self.sizes[l + 1]
            bound = 1.0 / np.sqrt(fi)
            chunks.append(rng.uniform(-bound, bound, size=fi * fo))
            chunks.append(rng.uniform(-bound, bound, size=fo))
        return np.concatenate(chunks)

    # -- input assembly ------------------------------------------------------

    def _time_feature_block(self, t: np.ndarray) -> np.ndarray:
        # t: (n, 1) -> (n, 1 + 2K) as [t, sin(w_j t), cos(w_j t)]
        cols = [t]
        for j in range(self.time_features):
            w = np.pi * (2.0**j)
            cols.append(np.sin(w * t))
            cols.append(np.cos(w * t))
        return np.concatenate(cols, axis=1)

    def _assemble(self, given: dict) -> tuple[np.ndarray, bool]:
        declared = [n for n, _ in self.inputs]
        missing = [n for n in declared if n not in given]
        extra = [n for n in given if n not in declared]
        if missing or extra:
            raise InputShapeError(
                f"inputs mismatch: missing={missing} unexpected={extra} (declared {declared})"
            )
        parts, squeeze = [], False
        for name, dim in self.inputs:
            a, was_1d = _as_batch(name, given[name], dim)
            squeeze = squeeze or was_1d
            parts.append(a)
        n = max(p.shape[0] for p in parts)
        parts = [np.broadcast_to(p, (n, p.shape[1])) if p.shape[0] == 1 else p for p in parts]
        if any(p.shape[0] != n for p in parts):
            raise InputShapeError("input segments have inconsistent batch sizes")
        if self.time_features > 0:
            parts = [
                self._time_feature_block(p) if name == TIME_SEGMENT else p
                for (name, _), p in zip(self.inputs, parts)
            ]
        x = np.ascontiguousarray(np.concatenate(parts, axis=1))
        return x, squeeze and n == 1

    # -- evaluation ----------------------------------------------------------

    def forward(self, inputs: dict, params: np.ndarray | None = None) -> np.ndarray:
        p = self.params if params is None else params
        x, squeeze = self._assemble(inputs)
        y, _ = kernels.mlp_forward(p, self.sizes, self._act_id, x)
        return y[0] if squeeze else y

    def __call__(self, **inputs) -> np.ndarray:
        return self.forward(inputs)

    def backward(
        self, inputs: dict, upstream, params: np.ndarray | None = None
    ) -> tuple[np.ndarray, dict]:
        """Exact gradients of sum_i <upstream_i, output_i>.

        Returns (parameter gradient, per-segment input gradients).  Input
        gradients are summed over broadcast rows, so segments passed as a
        single row receive a (dim,)-shaped gradient.
        """
        p = self.params if params is None else params
        x, _ = self._assemble(inputs)
        g, g_was_1d = _as_batch("upstream", upstream, self.out_dim)
        if g.shape[0] == 1 and x.shape[0] > 1:
            g = np.broadcast_to(g, (x.shape[0], self.out_dim))
        if g.shape[0] != x.shape[0]:
            raise InputShapeError(
                f"upstream batch {g.shape[0]} does not match input batch {x.shape[0]}"
            )
        _, cache = kernels.mlp_forward(p, self.sizes, self._act_id, x)
        dparams, dx = kernels.mlp_backward(
            p, self.sizes, self._act_id, x, cache, np.ascontiguousarray(g)
        )

        grads = {}
        off = 0
        for name, dim in self.inputs:
            width = 1 + 2 * self.time_features if (
                self.time_features > 0 and name == TIME_SEGMENT
            ) else dim
            seg = dx[:, off : off + width]
            off += width
            if self.time_features > 0 and name == TIME_SEGMENT:
                t = np.asarray(inputs[name], dtype=np.float64).reshape(-1, 1)
                dt = seg[:, 0:1].copy()
                for j in range(self.time_features):
                    w = np.pi * (2.0**j)
                    dt += w * np.cos(w * t) * seg[:, 1 + 2 * j : 2 + 2 * j]
                    dt -= w * np.sin(w * t) * seg[:, 2 + 2 * j : 3 + 2 * j]
                seg = dt
            raw = np.asarray(inputs[name])
            if raw.ndim == 1:
                seg = seg.sum(axis=0)
            grads[name] = seg
        return dparams, grads

    def copy(self) -> "Approximator":
        return Approximator(
            inputs=self.inputs,
            hidden=self.hidden,
            out_dim=self.out_dim,
            activation=self.activation,
            time_features=self.time_features,
            seed=self.seed,
            params=self.params.copy(),
        )

    def arch(self) -> dict:
        return {
            "inputs": [[n, d] for n, d in self.inputs],
            "hidden": list(self.hidden),
            "out_dim": self.out_dim,
            "activation": self.activation,
            "time_features": self.time_features,
            "seed": self.seed,
        }

    @classmethod
    def from_arch(cls, arch: dict, params: np.ndarray | None = None) -> "Approximator":
        return cls(
            inputs=tuple((n, d) for n, d in arch["inputs"]),
            hidden=tuple(arch["hidden"]),
            out_dim=arch["out_dim"],
            activation=arch["activation"],
            time_features=arch.get("time_features", 0),
            seed=arch.get("seed", 0),
            params=params,
        )


@dataclass
class AdamState:
    """Adaptive-moment optimizer state for one parameter vector."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: np.ndarray, lr: float = 3e-4,
                   beta1: float = 0.9, beta2: float = 0.999) -> "AdamState":
        if not (0.0 < beta1 < 1.0 and 0.0 < beta2 < 1.0):
            raise ConfigError("moment decay rates must lie in (0, 1)")
        if lr < 0.0:
            raise ConfigError("learning rate must be non-negative")
        return cls(m=np.zeros_like(params), v=np.zeros_like(params), lr=lr,
                   beta1=beta1, beta2=beta2)


def adam_step(params: np.ndarray, grad: np.ndarray, state: AdamState) -> None:
    """One in-place adaptive-moment update; increments the step counter."""
    if grad.shape != params.shape:
        raise InputShapeError(
            f"gradient length {grad.size} does not match parameter length {params.size}"
        )
    if not np.all(np.isfinite(grad)):
        raise TrainingDivergenceError("non-finite gradient entries")
    state.step += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * grad
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * grad * grad
    mhat = state.m / (1.0 - state.beta1**state.step)
    vhat = state.v / (1.0 - state.beta2**state.step)
    params -= state.lr * mhat / (np.sqrt(vhat) + state.eps)


@dataclass
class TargetTracker:
    """Slow-moving copy of a parameter vector (exponential moving average)."""

    params: np.ndarray
    kappa: float = 0.005

    def __post_init__(self):
        if not (0.0 < self.kappa <= 1.0):
            raise ConfigError("polyak coefficient must lie in (0, 1]")
        self.params = np.array(self.params, dtype=np.float64)

    def update(self, online: np.ndarray) -> None:
        if online.shape != self.params.shape:
            raise InputShapeError("online/target parameter lengths differ")
        self.params *= 1.0 - self.kappa
        self.params += self.kappa * online


# -- checkpoint file format --------------------------------------------------
#
# Line 1: JSON header (utf-8, '\n'-terminated) listing named blocks in order,
# each with its element count and optional net architecture.  Then per block:
# a little-endian uint64 count followed by that many little-endian float64s.

CHECKPOINT_FORMAT = "decisionflow-checkpoint-v1"


def save_checkpoint(path, blocks: dict[str, np.ndarray], meta: dict | None = None) -> None:
    header = {
        "format": CHECKPOINT_FORMAT,
        "blocks": [{"name": k, "count": int(np.asarray(v).size)} for k, v in blocks.items()],
        "meta": meta or {},
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for v in blocks.values():
            a = np.ascontiguousarray(np.asarray(v, dtype=np.float64).ravel())
            f.write(struct.pack("<Q", a.size))
            f.write(a.astype("<f8").tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        line = f.readline()
        try:
            header = json.loads(line.decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise SchemaError(f"unreadable checkpoint header: {e}") from e
        if header.get("format") != CHECKPOINT_FORMAT:
            raise SchemaError(f"unknown checkpoint format {header.get('format')!r}")
        blocks = {}
        for entry in header["blocks"]:
            raw = f.read(8)
            if len(raw) != 8:
                raise SchemaError(f"truncated checkpoint before block '{entry['name']}'")
            (count,) = struct.unpack("<Q", raw)
            if count != entry["count"]:
                raise SchemaError(
                    f"block '{entry['name']}' declares {entry['count']} values, "
                    f"prefix says {count}"
                )
            data = f.read(8 * count)
            if len(data) != 8 * count:
                raise SchemaError(f"truncated checkpoint in block '{entry['name']}'")
            blocks[entry["name"]] = np.frombuffer(data, dtype="<f8").astype(np.float64)
    return blocks, header.get("meta", {})
