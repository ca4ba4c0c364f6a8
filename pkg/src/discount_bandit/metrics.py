"""Prediction-quality and elasticity diagnostics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import stats

from .actions import RbfConfig, encode_rbf
from .reward import (
    DEFAULT_MAX_LOG_REWARD,
    PosteriorState,
    _capped_exp,
    compose_features_matrix,
    sample_thetas,
)

__all__ = [
    "EvalReport",
    "evaluate_predictions",
    "monotonicity_rate",
    "spearman",
    "uncertainty_profile",
    "wape",
]


@dataclass
class EvalReport:
    """WAPE and Spearman rank correlation over n prediction pairs."""

    wape: float
    spearman_rho: float
    n: int


def wape(actual, predicted) -> float:
    """Weighted absolute percentage error: sum|a - p| / sum|a|."""
    a = np.asarray(actual, dtype=float)
    p = np.asarray(predicted, dtype=float)
    if a.shape != p.shape:
        raise ValueError("actual and predicted must have equal length")
    denom = np.sum(np.abs(a))
    if denom <= 0.0:
        raise ValueError("sum of |actual| must be positive")
    return float(np.sum(np.abs(a - p)) / denom)


def spearman(actual, predicted) -> float:
    """Spearman rank correlation with average-rank tie handling."""
    a = np.asarray(actual, dtype=float)
    p = np.asarray(predicted, dtype=float)
    if a.shape != p.shape:
        raise ValueError("actual and predicted must have equal length")
    if a.size < 2:
        raise ValueError("need at least two observations")
    rho = stats.spearmanr(a, p).statistic
    return float(rho)


def evaluate_predictions(actual, predicted) -> EvalReport:
    return EvalReport(
        wape=wape(actual, predicted),
        spearman_rho=spearman(actual, predicted),
        n=len(np.atleast_1d(actual)),
    )


def monotonicity_rate(
    state: PosteriorState,
    contexts: np.ndarray,
    cfg: RbfConfig,
    depth_grid: Sequence[float] | None = None,
    *,
    rel_tol: float = 1e-12,
) -> float:
    """Fraction of (customer, adjacent-depth) cells with non-decreasing
    posterior-mean predicted basket value.

    Uses posterior-mean predictions, so the rate measures the fitted
    demand curves themselves rather than sampling noise.  A model that
    preserves negative price elasticity scores close to 1.
    """
    if depth_grid is None:
        depth_grid = np.linspace(0.0, 1.0, 21)
    grid = np.asarray(depth_grid, dtype=float)
    if grid.size < 2:
        raise ValueError("depth grid needs at least two points")
    mean = state.mean
    linear = np.column_stack(
        [compose_features_matrix(contexts, encode_rbf(a, cfg)) @ mean for a in grid]
    )
    # exp is monotone, so compare the linear predictors directly
    diffs = np.diff(linear, axis=1)
    slack = rel_tol * np.maximum(1.0, np.abs(linear[:, :-1]))
    return float(np.mean(diffs >= -slack))


def uncertainty_profile(
    state: PosteriorState,
    contexts: np.ndarray,
    cfg: RbfConfig,
    depth_grid: Sequence[float],
    n_samples: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Mean predictive standard deviation across customers per grid depth.

    One set of posterior draws is shared across all (customer, depth)
    cells; each cell's SD over those draws is an unbiased estimate of
    its predictive SD, and sharing keeps the profile cheap to compute.
    """
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    grid = np.asarray(depth_grid, dtype=float)
    thetas = sample_thetas(state, rng, n_samples)
    out = np.empty(grid.size)
    for k, a in enumerate(grid):
        phi = compose_features_matrix(contexts, encode_rbf(a, cfg))
        rewards = _capped_exp(phi @ thetas.T, DEFAULT_MAX_LOG_REWARD)
        out[k] = float(np.mean(np.std(rewards, axis=1, ddof=1)))
    return out
