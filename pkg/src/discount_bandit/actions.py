"""Featurization of continuous discount depths.

A discount depth is a "% off" fraction in [0, 1] (0.2 means a 20%-off
code).  Depths are encoded with radial basis functions so that nearby
depths share information through overlapping activations.  The simpler
continuous and Euclidean-distance encoders are kept as comparison
baselines.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

__all__ = [
    "DEFAULT_ALPHA",
    "DEFAULT_CENTERS",
    "RbfConfig",
    "effective_counts",
    "encode_continuous",
    "encode_euclidean",
    "encode_rbf",
    "validate_depth",
]

DEFAULT_CENTERS = (0.25, 0.5, 0.75)
DEFAULT_ALPHA = 20.0


def validate_depth(a, name: str = "depth") -> np.ndarray:
    """Check that a depth (or array of depths) lies in [0, 1]."""
    arr = np.asarray(a, dtype=float)
    if arr.size and (not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0):
        raise ValueError(f"{name} must lie in [0, 1], got {a!r}")
    return arr


@dataclass(frozen=True)
class RbfConfig:
    """Placement and width of the Gaussian bumps used to encode depths.

    ``width_mode`` selects how ``width`` enters the exponent:

    * ``"precision"`` (default): ``exp(-width * (a - mu)^2 / 2)``.  With
      the default width of 20 the three bumps produce well separated
      activation curves over [0, 1].
    * ``"denominator"``: ``exp(-(a - mu)^2 / (2 * width))``.  Literal
      Gaussian-kernel form; widths of order 1e-2 give comparable curves.

    ``width`` may be a single value shared by all centers or one value
    per center.
    """

    centers: tuple[float, ...] = DEFAULT_CENTERS
    width: float | tuple[float, ...] = DEFAULT_ALPHA
    width_mode: str = "precision"

    def __post_init__(self):
        centers = tuple(float(c) for c in np.atleast_1d(self.centers))
        if len(centers) < 1:
            raise ValueError("at least one RBF center is required")
        if any(not 0.0 <= c <= 1.0 for c in centers):
            raise ValueError(f"centers must lie in [0, 1], got {centers}")
        if any(b <= a for a, b in zip(centers, centers[1:])):
            raise ValueError(f"centers must be strictly increasing, got {centers}")
        widths = np.broadcast_to(np.asarray(self.width, dtype=float), (len(centers),))
        if not np.all(widths > 0.0):
            raise ValueError(f"widths must be positive, got {self.width!r}")
        if self.width_mode not in ("precision", "denominator"):
            raise ValueError(f"unknown width_mode {self.width_mode!r}")
        object.__setattr__(self, "centers", centers)
        object.__setattr__(
            self,
            "width",
            float(widths[0]) if np.all(widths == widths[0]) else tuple(widths.tolist()),
        )

    @property
    def dim(self) -> int:
        return len(self.centers)

    @property
    def widths(self) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.width, dtype=float), (self.dim,))


def encode_rbf(a, cfg: RbfConfig = RbfConfig()) -> np.ndarray:
    """Encode depth(s) as radial-basis activations.

    Component ``z`` equals ``exp(-(a - mu_z)^2 / (2 * alpha_z))`` in
    denominator mode and ``exp(-alpha_z * (a - mu_z)^2 / 2)`` in
    precision mode.  Every component lies in (0, 1] and equals 1 exactly
    when ``a`` sits on the corresponding center.

    Scalar input yields a vector of length ``cfg.dim``; an array of n
    depths yields an (n, cfg.dim) matrix.
    """
    arr = validate_depth(a)
    scalar = arr.ndim == 0
    arr = np.atleast_1d(arr)
    centers = np.asarray(cfg.centers)
    sq = (arr[:, None] - centers[None, :]) ** 2
    if cfg.width_mode == "precision":
        out = np.exp(-cfg.widths[None, :] * sq / 2.0)
    else:
        out = np.exp(-sq / (2.0 * cfg.widths[None, :]))
    return out[0] if scalar else out


def encode_continuous(a) -> np.ndarray:
    """Identity encoding: depth(s) as a 1-dim feature."""
    arr = validate_depth(a)
    scalar = arr.ndim == 0
    arr = np.atleast_1d(arr)
    return arr[:1].copy() if scalar else arr[:, None].copy()


def encode_euclidean(a, reference) -> np.ndarray:
    """Absolute distance to a reference depth as a 1-dim feature."""
    arr = validate_depth(a)
    ref = float(validate_depth(reference, "reference"))
    scalar = arr.ndim == 0
    arr = np.atleast_1d(arr)
    out = np.abs(arr - ref)
    return out[:1] if scalar else out[:, None]


def effective_counts(
    played: Sequence[float], grid: Sequence[float], cfg: RbfConfig = RbfConfig()
) -> np.ndarray:
    """Effective exposure of each grid depth given the depths played so far.

    For grid depth g the count is the sum over played depths a_j of the
    cosine similarity between ``encode_rbf(g)`` and ``encode_rbf(a_j)``.
    RBF vectors are strictly positive, so each summand lies in (0, 1]
    and equals 1 exactly when g == a_j: a depth played n times
    contributes an effective count of n at its own grid point and a
    smaller amount at neighbouring points.  Additive over concatenation
    of play lists.
    """
    grid_arr = validate_depth(np.asarray(grid, dtype=float), "grid")
    if grid_arr.size == 0:
        raise ValueError("grid must be non-empty")
    if len(played) == 0:
        return np.zeros(grid_arr.size)
    g_enc = encode_rbf(grid_arr, cfg)
    p_enc = encode_rbf(np.asarray(played, dtype=float), cfg)
    g_norm = np.linalg.norm(g_enc, axis=1)
    p_norm = np.linalg.norm(p_enc, axis=1)
    sims = (g_enc @ p_enc.T) / (g_norm[:, None] * p_norm[None, :])
    return sims.sum(axis=1)
