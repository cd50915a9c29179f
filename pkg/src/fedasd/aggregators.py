"""Server-side aggregation rules.

Every rule maps the current global vector and a list of client updates to
the next global vector. Updates only need ``params`` (flat array),
``num_samples`` and, for FedNova, ``local_steps``. Stateful rules (FedAvgM,
the FedOpt family) keep their buffers on an :class:`Aggregator` instance
owned by the server.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError

AGGREGATOR_IDS = (
    "fedavg",
    "simpleavg",
    "medianavg",
    "fednova",
    "fedavgm",
    "fedadagrad",
    "fedyogi",
    "fedadam",
)
LINEAR_AGGREGATORS = frozenset({"fedavg", "simpleavg"})


def _stack(updates) -> np.ndarray:
    if not updates:
        raise ValueError("aggregation needs at least one update")
    return np.stack([np.asarray(u.params, dtype=np.float64) for u in updates])


def _weights(updates) -> np.ndarray:
    n = np.array([u.num_samples for u in updates], dtype=np.float64)
    total = n.sum()
    if total <= 0:
        raise ValueError("total sample count must be positive")
    return n / total


def _weighted_mean(stack: np.ndarray, p: np.ndarray) -> np.ndarray:
    # offsets from the first row keep identical inputs (and a lone update) exact
    ref = stack[0]
    return ref + p @ (stack - ref)


def fedavg(w: np.ndarray, updates: Sequence) -> np.ndarray:
    """Sample-count weighted mean of client parameters."""
    return _weighted_mean(_stack(updates), _weights(updates))


def simple_avg(w: np.ndarray, updates: Sequence) -> np.ndarray:
    stack = _stack(updates)
    k = stack.shape[0]
    return _weighted_mean(stack, np.full(k, 1.0 / k))


def median_avg(w: np.ndarray, updates: Sequence) -> np.ndarray:
    # np.median averages the two middle values for even counts
    return np.median(_stack(updates), axis=0)


def fednova(w: np.ndarray, updates: Sequence) -> np.ndarray:
    """Average per-step normalized client directions, rescaled by the effective step count."""
    w = np.asarray(w, dtype=np.float64)
    tau = np.array([u.local_steps for u in updates], dtype=np.float64)
    if np.any(tau <= 0):
        raise ValueError("local_steps must be positive for every update")
    p = _weights(updates)
    d = (w[None, :] - _stack(updates)) / tau[:, None]
    tau_eff = float(p @ tau)
    return w - tau_eff * (p @ d)


@dataclass
class MomentumState:
    velocity: np.ndarray | None = None


def fedavgm(
    w: np.ndarray,
    updates: Sequence,
    state: MomentumState,
    beta: float = 0.9,
    server_lr: float = 1.0,
) -> tuple[np.ndarray, MomentumState]:
    w = np.asarray(w, dtype=np.float64)
    delta = w - fedavg(w, updates)
    v = delta if state.velocity is None else beta * state.velocity + delta
    return w - server_lr * v, MomentumState(v)


@dataclass
class MomentState:
    m: np.ndarray | None = None
    v: np.ndarray | None = None


def fedopt(
    w: np.ndarray,
    updates: Sequence,
    state: MomentState,
    mode: str,
    server_lr: float = 0.01,
    beta1: float = 0.9,
    beta2: float = 0.99,
    tau: float = 1e-3,
) -> tuple[np.ndarray, MomentState]:
    """FedAdagrad / FedYogi / FedAdam server step on the mean client drift."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    w = np.asarray(w, dtype=np.float64)
    delta = fedavg(w, updates) - w
    m = np.zeros_like(w) if state.m is None else state.m
    v = np.zeros_like(w) if state.v is None else state.v
    m = beta1 * m + (1.0 - beta1) * delta
    d2 = delta * delta
    if mode == "adagrad":
        v = v + d2
    elif mode == "adam":
        v = beta2 * v + (1.0 - beta2) * d2
    elif mode == "yogi":
        v = v - (1.0 - beta2) * d2 * np.sign(v - d2)
    else:
        raise ValueError(f"unknown FedOpt mode {mode!r}")
    return w + server_lr * m / (np.sqrt(v) + tau), MomentState(m, v)


@dataclass
class Aggregator:
    """Named aggregation rule plus the server-owned state it carries across rounds."""

    name: str
    hparams: dict = field(default_factory=dict)
    state: object = None

    def __post_init__(self):
        if self.name not in AGGREGATOR_IDS:
            raise ConfigError(f"unknown aggregator {self.name!r}; expected one of {AGGREGATOR_IDS}")
        self.reset()

    @property
    def linear(self) -> bool:
        return self.name in LINEAR_AGGREGATORS

    def reset(self) -> None:
        if self.name == "fedavgm":
            self.state = MomentumState()
        elif self.name.startswith("fed") and self.name[3:] in ("adagrad", "yogi", "adam"):
            self.state = MomentState()
        else:
            self.state = None

    def __call__(self, w: np.ndarray, updates: Sequence) -> np.ndarray:
        hp = self.hparams
        if self.name == "fedavgm":
            out, self.state = fedavgm(
                w, updates, self.state, hp.get("beta", 0.9), hp.get("server_lr", 1.0)
            )
            return out
        if self.state is not None:
            out, self.state = fedopt(
                w,
                updates,
                self.state,
                self.name[3:],
                server_lr=hp.get("server_lr", 0.01),
                beta1=hp.get("beta1", 0.9),
                beta2=hp.get("beta2", 0.99),
                tau=hp.get("tau", 1e-3),
            )
            return out
        return _STATELESS[self.name](w, updates)


_STATELESS: dict[str, Callable] = {
    "fedavg": fedavg,
    "simpleavg": simple_avg,
    "medianavg": median_avg,
    "fednova": fednova,
}


def make_aggregator(name: str, **hparams) -> Aggregator:
    return Aggregator(name.lower(), dict(hparams))
