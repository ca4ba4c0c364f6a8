"""Bandit scoring strategies feeding the allocation integer program.

Each policy turns a posterior snapshot plus a batch of context
embeddings into an I x K matrix of positive pseudo basket values, one
row per customer and one column per candidate discount depth.  The
matrix is what the allocator consumes; strategies differ only in how
they trade the posterior mean against its uncertainty.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .actions import RbfConfig, encode_rbf
from .reward import (
    DEFAULT_MAX_LOG_REWARD,
    PosteriorState,
    _capped_exp,
    compose_features_matrix,
    sample_thetas,
)

__all__ = [
    "ScoreMatrix",
    "epsilon_greedy_scores",
    "greedy_scores",
    "random_assignment",
    "ts_scores",
    "ucb_scores",
]


@dataclass
class ScoreMatrix:
    """Positive pseudo basket values for every customer-action pair."""

    values: np.ndarray
    customers: list
    actions: tuple[float, ...]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.actions = tuple(float(a) for a in self.actions)
        if self.values.ndim != 2 or self.values.shape != (
            len(self.customers),
            len(self.actions),
        ):
            raise ValueError("score matrix shape must match customers x actions")
        if np.any(self.values <= 0.0) or not np.all(np.isfinite(self.values)):
            raise ValueError("scores must be strictly positive and finite")


def _composed_per_action(
    contexts: np.ndarray, actions: Sequence[float], cfg: RbfConfig
) -> list[np.ndarray]:
    contexts = np.asarray(contexts, dtype=float)
    return [compose_features_matrix(contexts, encode_rbf(a, cfg)) for a in actions]


def ts_scores(
    state: PosteriorState,
    contexts: np.ndarray,
    actions: Sequence[float],
    cfg: RbfConfig,
    rng: np.random.Generator,
    *,
    customers: Sequence | None = None,
) -> ScoreMatrix:
    """Thompson-sampling scores: one posterior draw per customer.

    A single coefficient draw is shared across all of a customer's
    actions, so each sampled demand curve is internally coherent while
    the batch as a whole still explores.  With ``beta = 0`` this
    degenerates to :func:`greedy_scores`.
    """
    phis = _composed_per_action(contexts, actions, cfg)
    thetas = sample_thetas(state, rng, len(contexts))
    linear = np.column_stack([np.einsum("ij,ij->i", thetas, phi) for phi in phis])
    return ScoreMatrix(
        values=_capped_exp(linear, DEFAULT_MAX_LOG_REWARD),
        customers=list(customers) if customers is not None else list(range(len(contexts))),
        actions=tuple(actions),
    )


def greedy_scores(
    state: PosteriorState,
    contexts: np.ndarray,
    actions: Sequence[float],
    cfg: RbfConfig,
    *,
    customers: Sequence | None = None,
) -> ScoreMatrix:
    """Posterior-mean scores, deterministic given the state."""
    phis = _composed_per_action(contexts, actions, cfg)
    mean = state.mean
    linear = np.column_stack([phi @ mean for phi in phis])
    return ScoreMatrix(
        values=_capped_exp(linear, DEFAULT_MAX_LOG_REWARD),
        customers=list(customers) if customers is not None else list(range(len(contexts))),
        actions=tuple(actions),
    )


def ucb_scores(
    state: PosteriorState,
    contexts: np.ndarray,
    actions: Sequence[float],
    cfg: RbfConfig,
    ucb_beta: float,
    *,
    customers: Sequence | None = None,
) -> ScoreMatrix:
    """Optimistic scores ``exp(<mu, phi> + ucb_beta * sqrt(phi' V_inv phi))``.

    The bonus is the posterior confidence width along phi, so it shrinks
    as observations accrue; with ``ucb_beta = 0`` this equals greedy.
    """
    if ucb_beta < 0.0:
        raise ValueError("ucb_beta must be non-negative")
    phis = _composed_per_action(contexts, actions, cfg)
    mean = state.mean
    cols = []
    for phi in phis:
        width = np.einsum("ij,ij->i", phi @ state.V_inv, phi)
        cols.append(phi @ mean + ucb_beta * np.sqrt(np.maximum(width, 0.0)))
    return ScoreMatrix(
        values=_capped_exp(np.column_stack(cols), DEFAULT_MAX_LOG_REWARD),
        customers=list(customers) if customers is not None else list(range(len(contexts))),
        actions=tuple(actions),
    )


def epsilon_greedy_scores(
    state: PosteriorState,
    contexts: np.ndarray,
    actions: Sequence[float],
    cfg: RbfConfig,
    epsilon: float,
    rng: np.random.Generator,
    *,
    customers: Sequence | None = None,
) -> ScoreMatrix:
    """Greedy scores with an epsilon fraction of customer rows randomized.

    A randomized row is replaced by i.i.d. uniform draws from
    (0.5 * m, 1.5 * m) where m is the batch mean greedy score — a
    positive range on the scale of the greedy values, so randomized
    customers still compete for capacity while their depth preference
    becomes arbitrary.  Whole rows (not single cells) are randomized to
    keep each customer's allocator input coherent.
    """
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    base = greedy_scores(state, contexts, actions, cfg, customers=customers)
    explore = rng.random(len(base.customers)) < epsilon
    n_explore = int(np.count_nonzero(explore))
    if n_explore:
        m = float(base.values.mean())
        base.values[explore] = rng.uniform(
            0.5 * m, 1.5 * m, size=(n_explore, len(actions))
        )
    return base


def random_assignment(
    customers: Sequence,
    actions: Sequence[float],
    capacities: Sequence[int],
    rng: np.random.Generator,
):
    """Uniformly random feasible assignment that fills the capacities.

    Every unit of capacity is used while customers remain: the depth
    slots (action a repeated N_a times) are shuffled, the customers are
    shuffled, and the two lists are paired off.  Returns an
    :class:`~discount_bandit.allocator.Assignment` with no objective.
    """
    from .allocator import Assignment  # local import to avoid a cycle

    capacities = np.asarray(capacities, dtype=int)
    if np.any(capacities < 0):
        raise ValueError("capacities must be non-negative")
    n = len(customers)
    chosen = np.full(n, -1, dtype=int)
    slots = np.repeat(np.arange(len(actions)), capacities)
    if n and slots.size:
        rng.shuffle(slots)
        order = rng.permutation(n)
        take = min(n, slots.size)
        chosen[order[:take]] = slots[:take]
    return Assignment(
        chosen=chosen,
        actions=tuple(float(a) for a in actions),
        customers=list(customers),
        objective=None,
    )
