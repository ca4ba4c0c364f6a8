"""Bayesian log-linear reward model with a closed-form Thompson posterior.

The model predicts log full-price basket value as a linear function of a
composed feature vector (context embedding, action encoding, and all
pairwise products of the two).  With a Gaussian prior the posterior over
the coefficient vector stays Gaussian and is maintained in closed form:
the precision-like matrix ``V_bar`` accumulates outer products of
features, the vector ``B`` accumulates feature-weighted log rewards, and
the posterior is

    theta ~ N(V_bar^-1 B, beta^2 V_bar^-1)

``V_bar^-1`` is kept current through rank-1 (Sherman-Morrison) updates,
one per observation, at O(d^2) cost each.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "DEFAULT_MAX_LOG_REWARD",
    "PosteriorState",
    "compose_features",
    "compose_features_matrix",
    "composed_dim",
    "init_posterior",
    "load_posterior",
    "predict_reward",
    "predictive_sd",
    "sample_theta",
    "sample_thetas",
    "save_posterior",
    "update_posterior",
]

logger = logging.getLogger(__name__)

# Cap on the linear predictor before exponentiation; exp(50) ~ 5e21 is far
# beyond any meaningful basket value, so hitting it signals a runaway draw
# rather than a real prediction.
DEFAULT_MAX_LOG_REWARD = 50.0

CHECKPOINT_VERSION = 1


def composed_dim(d1: int, d2: int) -> int:
    """Length of the composed feature vector: d1 + d2 + d1*d2."""
    return d1 + d2 + d1 * d2


def compose_features(psi1: np.ndarray, psi2: np.ndarray) -> np.ndarray:
    """Concatenate context features, action features and their products.

    The interaction block is the outer product ``psi1 (x) psi2``
    flattened row-major with psi1 as the outer index, i.e. ordered
    ``psi1[0]*psi2[0], psi1[0]*psi2[1], ..., psi1[1]*psi2[0], ...``.
    """
    psi1 = np.asarray(psi1, dtype=float)
    psi2 = np.asarray(psi2, dtype=float)
    if psi1.size == 0 or psi2.size == 0:
        raise ValueError("feature blocks must be non-empty")
    return np.concatenate([psi1, psi2, np.outer(psi1, psi2).ravel()])


def compose_features_matrix(psi1s: np.ndarray, psi2: np.ndarray) -> np.ndarray:
    """Row-wise :func:`compose_features` for n contexts and one action."""
    psi1s = np.asarray(psi1s, dtype=float)
    psi2 = np.asarray(psi2, dtype=float)
    if psi1s.ndim != 2 or psi1s.shape[1] == 0 or psi2.size == 0:
        raise ValueError("need an (n, d1) context matrix and a non-empty action vector")
    n = psi1s.shape[0]
    inter = (psi1s[:, :, None] * psi2[None, None, :]).reshape(n, -1)
    return np.hstack([psi1s, np.broadcast_to(psi2, (n, psi2.size)), inter])


@dataclass
class PosteriorState:
    """Sufficient statistics of the Gaussian posterior.

    ``V_inv`` mirrors ``inv(V_bar)`` via Sherman-Morrison updates.  To
    bound numeric drift the matrix is re-symmetrized every
    ``resym_every`` observations and fully re-inverted every
    ``reinvert_every`` observations (0 disables either safeguard).
    Mutation is single-writer; reads may run concurrently against a
    snapshot taken via :meth:`copy`.
    """

    V_bar: np.ndarray
    V_inv: np.ndarray
    B: np.ndarray
    beta: float
    prior_scale: float
    n_observations: int = 0
    resym_every: int = 1000
    reinvert_every: int = 10000
    _since_resym: int = field(default=0, repr=False)
    _since_reinvert: int = field(default=0, repr=False)

    @property
    def dim(self) -> int:
        return self.B.shape[0]

    @property
    def mean(self) -> np.ndarray:
        """Posterior mean ``V_bar^-1 B``."""
        return self.V_inv @ self.B

    def copy(self) -> "PosteriorState":
        return PosteriorState(
            V_bar=self.V_bar.copy(),
            V_inv=self.V_inv.copy(),
            B=self.B.copy(),
            beta=self.beta,
            prior_scale=self.prior_scale,
            n_observations=self.n_observations,
            resym_every=self.resym_every,
            reinvert_every=self.reinvert_every,
        )


def init_posterior(
    d: int,
    prior_scale: float = 1.0,
    beta: float = 1.0,
    *,
    resym_every: int = 1000,
    reinvert_every: int = 10000,
) -> PosteriorState:
    """Fresh posterior with ``V_bar = prior_scale * I`` and ``B = 0``."""
    if d < 1:
        raise ValueError(f"dimension must be >= 1, got {d}")
    if prior_scale <= 0.0:
        raise ValueError(f"prior_scale must be positive, got {prior_scale}")
    if beta < 0.0:
        raise ValueError(f"beta must be non-negative, got {beta}")
    return PosteriorState(
        V_bar=prior_scale * np.eye(d),
        V_inv=np.eye(d) / prior_scale,
        B=np.zeros(d),
        beta=float(beta),
        prior_scale=float(prior_scale),
        resym_every=resym_every,
        reinvert_every=reinvert_every,
    )


def update_posterior(
    state: PosteriorState, phis: np.ndarray, log_rewards: np.ndarray
) -> PosteriorState:
    """Fold a batch of (feature, log reward) observations into the posterior.

    Updates in place and returns the state for chaining.  ``V_bar`` and
    ``B`` are additive over any batching of the same observations;
    ``V_inv`` is advanced one rank-1 Sherman-Morrison step per row.
    Rewards must be finite log values (the raw basket value must be
    positive before taking the log); offending rows are rejected by
    index.
    """
    phis = np.atleast_2d(np.asarray(phis, dtype=float))
    y = np.atleast_1d(np.asarray(log_rewards, dtype=float))
    if phis.shape[0] == 0:
        return state
    if phis.shape[1] != state.dim:
        raise ValueError(f"feature dim {phis.shape[1]} != posterior dim {state.dim}")
    if phis.shape[0] != y.shape[0]:
        raise ValueError("features and rewards must align")
    bad = np.flatnonzero(~np.isfinite(y) | ~np.all(np.isfinite(phis), axis=1))
    if bad.size:
        raise ValueError(
            f"non-finite log reward or features at batch index {int(bad[0])}"
            " (raw rewards must be positive before the log transform)"
        )

    state.V_bar += phis.T @ phis
    state.B += phis.T @ y
    V_inv = state.V_inv
    for u in phis:
        Vu = V_inv @ u
        V_inv -= np.outer(Vu, Vu) / (1.0 + u @ Vu)
        state.n_observations += 1
        state._since_resym += 1
        state._since_reinvert += 1
        if state.reinvert_every and state._since_reinvert >= state.reinvert_every:
            V_inv[:] = np.linalg.inv(state.V_bar)
            state._since_reinvert = 0
            state._since_resym = 0
        elif state.resym_every and state._since_resym >= state.resym_every:
            V_inv[:] = (V_inv + V_inv.T) / 2.0
            state._since_resym = 0
    return state


def _covariance_factor(state: PosteriorState) -> np.ndarray:
    """Lower-triangular L with L L^T = beta^2 * V_inv, with jitter retry."""
    cov = (state.V_inv + state.V_inv.T) / 2.0
    jitter = 0.0
    for attempt in range(4):
        try:
            return state.beta * np.linalg.cholesky(cov + jitter * np.eye(state.dim))
        except np.linalg.LinAlgError:
            scale = np.trace(cov) / state.dim
            jitter = scale * 10.0 ** (-10 + 2 * attempt)
    raise np.linalg.LinAlgError(
        "posterior covariance not positive definite even after jitter"
    )


def sample_theta(state: PosteriorState, rng: np.random.Generator) -> np.ndarray:
    """One draw from N(V_bar^-1 B, beta^2 V_bar^-1)."""
    return sample_thetas(state, rng, 1)[0]


def sample_thetas(state: PosteriorState, rng: np.random.Generator, n: int) -> np.ndarray:
    """n independent posterior draws, stacked as an (n, d) matrix."""
    mean = state.mean
    if state.beta == 0.0:
        return np.broadcast_to(mean, (n, state.dim)).copy()
    L = _covariance_factor(state)
    z = rng.standard_normal((n, state.dim))
    return mean[None, :] + z @ L.T


def predict_reward(
    theta: np.ndarray, phi: np.ndarray, *, max_log: float = DEFAULT_MAX_LOG_REWARD
) -> float:
    """Pseudo basket value ``exp(<theta, phi>)``, always positive.

    The linear term is capped at ``max_log`` before exponentiation to
    keep runaway posterior draws from overflowing; caps are counted in
    the log.
    """
    u = float(np.dot(theta, phi))
    if u > max_log:
        logger.warning("reward prediction capped: linear term %.3f > %.3f", u, max_log)
        u = max_log
    return float(np.exp(u))


def _capped_exp(linear: np.ndarray, max_log: float) -> np.ndarray:
    over = int(np.count_nonzero(linear > max_log))
    if over:
        logger.warning("%d reward predictions capped at exp(%.1f)", over, max_log)
    return np.exp(np.minimum(linear, max_log))


def predictive_sd(
    state: PosteriorState,
    phi: np.ndarray,
    n_samples: int,
    rng: np.random.Generator,
    *,
    max_log: float = DEFAULT_MAX_LOG_REWARD,
) -> float:
    """Monte-Carlo standard deviation of the predicted basket value."""
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    thetas = sample_thetas(state, rng, n_samples)
    rewards = _capped_exp(thetas @ np.asarray(phi, dtype=float), max_log)
    return float(np.std(rewards, ddof=1))


def save_posterior(state: PosteriorState, path) -> None:
    """Write a posterior checkpoint; round-trips exactly."""
    np.savez(
        Path(path),
        version=np.array(CHECKPOINT_VERSION),
        V_bar=state.V_bar,
        V_inv=state.V_inv,
        B=state.B,
        beta=np.array(state.beta),
        prior_scale=np.array(state.prior_scale),
        n_observations=np.array(state.n_observations),
        resym_every=np.array(state.resym_every),
        reinvert_every=np.array(state.reinvert_every),
    )


def load_posterior(path) -> PosteriorState:
    with np.load(Path(path)) as data:
        version = int(data["version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported posterior checkpoint version {version}")
        return PosteriorState(
            V_bar=data["V_bar"],
            V_inv=data["V_inv"],
            B=data["B"],
            beta=float(data["beta"]),
            prior_scale=float(data["prior_scale"]),
            n_observations=int(data["n_observations"]),
            resym_every=int(data["resym_every"]),
            reinvert_every=int(data["reinvert_every"]),
        )
