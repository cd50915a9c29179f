"""Per-round client selection.

Four policies: uniform random, inverse feature-spread, sample quantity, and
a contribution score that prefers clients with low training loss and small
drift from the global model. Every policy returns a sorted list of distinct
client ids of size ``max(1, round(fraction * K))``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError

SAMPLER_IDS = ("random", "std", "quantity", "score")
STD_EPS = 1e-8


@dataclass
class ClientProfile:
    client_id: str
    n_samples: int
    feature_std: float = 0.0
    last_score: float | None = None
    last_scored_round: int | None = None
    last_loss_sum: float | None = None
    last_divergence: float | None = None

    def __post_init__(self):
        if self.n_samples < 0 or self.feature_std < 0:
            raise ValueError("n_samples and feature_std must be non-negative")


def selection_size(k: int, fraction: float) -> int:
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"fraction must lie in (0, 1], got {fraction}")
    if k < 1:
        raise ValueError("no clients to sample from")
    # half-up rounding, not banker's
    return min(k, max(1, math.floor(fraction * k + 0.5)))


def _weighted(clients, weights, fraction, rng) -> list[str]:
    m = selection_size(len(clients), fraction)
    w = np.asarray(weights, dtype=np.float64)
    if m == len(clients):
        return sorted(c.client_id for c in clients)
    if not np.all(np.isfinite(w)) or w.sum() <= 0:
        w = np.ones(len(clients))
    positive = np.count_nonzero(w)
    if positive < m:
        # zero-weight clients only fill seats the weighted pool cannot
        picked = list(np.flatnonzero(w))
        rest = np.flatnonzero(w == 0)
        picked += list(rng.choice(rest, size=m - positive, replace=False))
    else:
        picked = rng.choice(len(clients), size=m, replace=False, p=w / w.sum())
    return sorted(clients[i].client_id for i in picked)


def random_sample(clients: Sequence[ClientProfile], fraction: float, rng) -> list[str]:
    return _weighted(clients, np.ones(len(clients)), fraction, rng)


def std_sample(clients: Sequence[ClientProfile], fraction: float, rng) -> list[str]:
    """Selection probability inversely proportional to feature standard deviation."""
    stds = np.array([c.feature_std for c in clients], dtype=np.float64)
    if np.all(stds == 0):
        weights = np.ones(len(clients))
    else:
        weights = 1.0 / (stds + STD_EPS)
    return _weighted(clients, weights, fraction, rng)


def quantity_sample(clients: Sequence[ClientProfile], fraction: float, rng) -> list[str]:
    n = np.array([c.n_samples for c in clients], dtype=np.float64)
    return _weighted(clients, n / max(n.sum(), 1.0), fraction, rng)


def client_score(loss_sum: float, divergence_l2: float, alpha: float, beta: float) -> float:
    """alpha * loss + beta * divergence; inputs are expected pre-normalized."""
    if alpha < 0 or beta < 0 or alpha + beta <= 0:
        raise ConfigError("alpha and beta must be non-negative with a positive sum")
    return alpha * loss_sum + beta * divergence_l2


def _minmax(x: np.ndarray) -> np.ndarray:
    lo, hi = x.min(), x.max()
    if hi - lo <= 0:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


def refresh_scores(clients: Sequence[ClientProfile], alpha: float, beta: float) -> None:
    """Recompute ``last_score`` for every scored client against the current pool."""
    scored = [c for c in clients if c.last_loss_sum is not None]
    if not scored:
        return
    loss = _minmax(np.array([c.last_loss_sum for c in scored], dtype=np.float64))
    div = _minmax(np.array([c.last_divergence for c in scored], dtype=np.float64))
    for c, lo, dv in zip(scored, loss, div):
        c.last_score = client_score(float(lo), float(dv), alpha, beta)


def score_sample(clients: Sequence[ClientProfile], fraction: float, round_: int) -> list[str]:
    """The lowest-scoring clients; ties go to the lexicographically smaller id.

    Round 1, or any round where some client was never scored, selects
    everyone so that every client gets a score.
    """
    if round_ <= 1 or any(c.last_score is None for c in clients):
        return sorted(c.client_id for c in clients)
    m = selection_size(len(clients), fraction)
    ranked = sorted(clients, key=lambda c: (c.last_score, c.client_id))
    return sorted(c.client_id for c in ranked[:m])


class Sampler:
    """Stateful wrapper the server calls once per round."""

    def __init__(self, name: str, fraction: float = 1.0, alpha: float = 0.5, beta: float = 0.5):
        if name not in SAMPLER_IDS:
            raise ConfigError(f"unknown sampler {name!r}; expected one of {SAMPLER_IDS}")
        selection_size(1, fraction)
        if name == "score":
            client_score(0.0, 0.0, alpha, beta)
        self.name = name
        self.fraction = fraction
        self.alpha = alpha
        self.beta = beta

    def select(self, profiles: Sequence[ClientProfile], round_: int, rng) -> list[str]:
        if self.name == "random":
            return random_sample(profiles, self.fraction, rng)
        if self.name == "std":
            return std_sample(profiles, self.fraction, rng)
        if self.name == "quantity":
            return quantity_sample(profiles, self.fraction, rng)
        return score_sample(profiles, self.fraction, round_)

    def observe(
        self,
        profiles: dict[str, ClientProfile],
        updates: Sequence,
        round_: int,
    ) -> None:
        """Record loss and drift of this round's participants; others keep stale values.

        The drift norm is reported by each client, which holds both its own
        and the broadcast parameters, so this also works under encryption.
        """
        if self.name != "score":
            return
        for u in updates:
            p = profiles[u.client_id]
            p.last_loss_sum = float(u.train_loss_sum)
            p.last_divergence = float(u.divergence_l2)
            p.last_scored_round = round_
        refresh_scores(list(profiles.values()), self.alpha, self.beta)
