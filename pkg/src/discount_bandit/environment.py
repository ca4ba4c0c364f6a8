"""Synthetic customer environment, logged campaigns, and replay evaluation.

The world stands in for real campaign data: each customer has a latent
embedding derived from raw features, and their log basket value rises
with discount depth through a customer-specific mix of increasing
elasticity curves (negative price elasticity by construction, verified
on a grid when the world is built).  Purchases require engagement,
whose probability is logistic in depth.

The bandit observes only the first ``embed_dim`` latent coordinates and
encodes actions with its own basis, so its model is a good but
imperfect approximation of the world — the regime the toolkit is meant
to be exercised in.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .actions import RbfConfig, encode_rbf
from .policies import ScoreMatrix, random_assignment
from .reward import PosteriorState, compose_features_matrix, update_posterior

__all__ = [
    "Customers",
    "LOG_FORMAT",
    "ReplayBatch",
    "ReplayEvent",
    "ReplayResult",
    "SyntheticWorld",
    "WorldConfig",
    "engagement_from_log",
    "generate_log",
    "generate_world",
    "read_log",
    "replay_evaluate",
    "sample_outcome",
    "uniform_resample",
    "write_log",
]

LOG_FORMAT = "discount-replay-log"
LOG_VERSION = 1


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


def _increasing_carrier(rbf: RbfConfig, target_fn, min_slope: float = 0.05) -> np.ndarray:
    """RBF coefficients least-squares fitted to an increasing curve.

    The fitted curve itself must come out strictly increasing (checked
    on a fine grid); wide, overlapping bumps keep the fit wobble small
    enough for that to hold.  Any positive per-customer mixture of such
    carriers is then strictly increasing by construction.
    """
    grid = np.linspace(0.0, 1.0, 2001)
    psi = encode_rbf(grid, rbf)
    theta = np.linalg.lstsq(psi, target_fn(grid), rcond=None)[0]
    slope = np.diff(psi @ theta) / (grid[1] - grid[0])
    if slope.min() < min_slope:
        raise ValueError(
            "elasticity carrier fit is not strictly increasing "
            f"(min slope {slope.min():.4f}); widen the world RBF bumps"
        )
    return theta


def _logit(p: float) -> float:
    return float(np.log(p / (1.0 - p)))


@dataclass(frozen=True)
class WorldConfig:
    """Knobs of the synthetic generator.

    The observable context is ``embed_dim``-dimensional; the world's
    true latent space has ``latent_extra`` additional coordinates, so a
    model built on the observable part is mildly misspecified.  The
    world encodes depths with its own RBF basis (``world_centers`` /
    ``world_alpha``), independent of whatever basis an agent uses.
    """

    n_features: int = 20
    embed_dim: int = 6
    latent_extra: int = 2
    base_log_value: float = 3.0
    base_sd: float = 0.45
    slope_linear: float = 0.45
    slope_concave: float = 0.35
    heterogeneity: float = 0.2
    noise_sd: float = 0.3
    world_centers: tuple[float, ...] = (0.1, 0.3, 0.5, 0.7, 0.9)
    world_alpha: float = 6.0
    engage_rate_low: float = 0.25
    engage_rate_high: float = 0.75
    engage_depth_low: float = 0.1
    engage_depth_high: float = 0.5
    seed: int = 0
    verify_customers: int = 1000
    verify_grid: int = 101

    @property
    def latent_dim(self) -> int:
        return self.embed_dim + self.latent_extra


@dataclass
class Customers:
    """A sampled batch: raw features, true latents, observable embeddings."""

    ids: np.ndarray
    features: np.ndarray
    latent: np.ndarray
    embeddings: np.ndarray

    def __len__(self) -> int:
        return self.ids.shape[0]


@dataclass
class SyntheticWorld:
    """Ground-truth generative model, fully determined by its config."""

    config: WorldConfig
    latent_map: np.ndarray
    latent_bias: float
    w_context: np.ndarray
    w_elastic1: np.ndarray
    w_elastic2: np.ndarray
    slope1_const: float
    slope2_const: float
    carrier_linear: np.ndarray
    carrier_concave: np.ndarray
    engage_k: float
    engage_mid: float
    theta_star: np.ndarray = field(repr=False, default=None)

    @property
    def noise_sd(self) -> float:
        return self.config.noise_sd

    @property
    def world_rbf(self) -> RbfConfig:
        return RbfConfig(
            centers=self.config.world_centers,
            width=self.config.world_alpha,
            width_mode="precision",
        )

    def latent_of(self, features: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(features, dtype=float))
        return _softplus(X @ self.latent_map.T + self.latent_bias)

    def embed(self, features: np.ndarray) -> np.ndarray:
        """Observable context embedding for raw features."""
        return self.latent_of(features)[:, : self.config.embed_dim]

    def sample_customers(
        self, n: int, rng: np.random.Generator, start_id: int = 0
    ) -> Customers:
        X = rng.standard_normal((n, self.config.n_features))
        latent = self.latent_of(X)
        return Customers(
            ids=np.arange(start_id, start_id + n),
            features=X,
            latent=latent,
            embeddings=latent[:, : self.config.embed_dim],
        )

    def _curves(self, depths: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        psi = encode_rbf(np.asarray(depths, dtype=float), self.world_rbf)
        return psi @ self.carrier_linear, psi @ self.carrier_concave

    def mean_log_value(self, latent: np.ndarray, depths) -> np.ndarray:
        """E[ln F] for each customer, either paired with one depth per
        customer (1-d result) or crossed with a depth grid (2-d result)."""
        latent = np.atleast_2d(latent)
        base = latent @ self.w_context
        m1 = self.slope1_const + latent @ self.w_elastic1
        m2 = self.slope2_const + latent @ self.w_elastic2
        depths = np.asarray(depths, dtype=float)
        t1, t2 = self._curves(depths)
        if depths.shape == (latent.shape[0],):
            return base + m1 * t1 + m2 * t2
        return base[:, None] + np.outer(m1, t1) + np.outer(m2, t2)

    def engagement_rate(self, depths) -> np.ndarray:
        a = np.asarray(depths, dtype=float)
        return 1.0 / (1.0 + np.exp(-self.engage_k * (a - self.engage_mid)))

    def pretraining_dataset(
        self, n: int, rng: np.random.Generator
    ) -> tuple[np.ndarray, np.ndarray]:
        """(features, log basket value) pairs at zero discount, for
        embedding-model training; no engagement filtering applies."""
        cust = self.sample_customers(n, rng)
        mean = self.mean_log_value(cust.latent, np.zeros(n))
        return cust.features, mean + rng.normal(0.0, self.noise_sd, n)


def generate_world(config: WorldConfig = WorldConfig()) -> SyntheticWorld:
    """Build and verify a synthetic world from its config.

    Elasticity carriers are RBF fits of increasing curves; construction
    fails if any of ``verify_customers`` freshly sampled customers has a
    non-increasing mean basket value anywhere on the verification grid.
    """
    cfg = config
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 71]))
    latent_map = rng.normal(0.0, 1.0 / np.sqrt(cfg.n_features), (cfg.latent_dim, cfg.n_features))
    latent_bias = 0.5

    world = SyntheticWorld(
        config=cfg,
        latent_map=latent_map,
        latent_bias=latent_bias,
        w_context=np.zeros(cfg.latent_dim),
        w_elastic1=np.zeros(cfg.latent_dim),
        w_elastic2=np.zeros(cfg.latent_dim),
        slope1_const=0.0,
        slope2_const=0.0,
        carrier_linear=np.zeros(len(cfg.world_centers)),
        carrier_concave=np.zeros(len(cfg.world_centers)),
        engage_k=1.0,
        engage_mid=0.0,
    )

    # carriers: RBF fits of two increasing curve shapes (linear and saturating)
    world.carrier_linear = _increasing_carrier(world.world_rbf, lambda g: g)
    world.carrier_concave = _increasing_carrier(world.world_rbf, lambda g: 1.5 * g - 0.5 * g**2)

    # calibrate linear coefficients against a reference latent sample
    u_cal = world.latent_of(rng.standard_normal((4096, cfg.n_features)))

    def standardized(raw: np.ndarray, target_mean: float, target_sd: float):
        v = u_cal @ raw
        w = raw * (target_sd / max(float(v.std()), 1e-12))
        const = target_mean - float((u_cal @ w).mean())
        return w, const

    w_ctx, ctx_const = standardized(rng.standard_normal(cfg.latent_dim), cfg.base_log_value, cfg.base_sd)
    # fold the constant into the mean latent direction (features carry no intercept)
    mu = u_cal.mean(axis=0)
    w_ctx = w_ctx + mu * (ctx_const / float(mu @ mu))
    world.w_context = w_ctx

    world.w_elastic1, world.slope1_const = standardized(
        rng.standard_normal(cfg.latent_dim), cfg.slope_linear, cfg.heterogeneity * cfg.slope_linear
    )
    world.w_elastic2, world.slope2_const = standardized(
        rng.standard_normal(cfg.latent_dim), cfg.slope_concave, cfg.heterogeneity * cfg.slope_concave
    )

    if not 0.0 < cfg.engage_rate_low < cfg.engage_rate_high < 1.0:
        raise ValueError("engagement rates must satisfy 0 < low < high < 1")
    world.engage_k = (_logit(cfg.engage_rate_high) - _logit(cfg.engage_rate_low)) / (
        cfg.engage_depth_high - cfg.engage_depth_low
    )
    world.engage_mid = cfg.engage_depth_low - _logit(cfg.engage_rate_low) / world.engage_k

    # reference coefficient vector in the composed-feature layout
    kw = len(cfg.world_centers)
    action_block = world.slope1_const * world.carrier_linear + world.slope2_const * world.carrier_concave
    inter = np.outer(world.w_elastic1, world.carrier_linear) + np.outer(
        world.w_elastic2, world.carrier_concave
    )
    world.theta_star = np.concatenate([world.w_context, action_block, inter.ravel()])

    verify_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 72]))
    sample = world.sample_customers(cfg.verify_customers, verify_rng)
    vgrid = np.linspace(0.0, 1.0, cfg.verify_grid)
    means = world.mean_log_value(sample.latent, vgrid)
    if not np.all(np.diff(means, axis=1) > 0.0):
        worst = int(np.argmin(np.diff(means, axis=1).min(axis=1)))
        raise ValueError(
            "world config rejected: mean basket value is not strictly increasing "
            f"in depth for sampled customer {worst}; reduce heterogeneity or "
            "adjust the elasticity slopes"
        )
    return world


def sample_outcome(
    world: SyntheticWorld, latent_row: np.ndarray, a: float, rng: np.random.Generator
) -> tuple[bool, float]:
    """Draw (engaged, full-price value) for one customer at one depth."""
    engaged = bool(rng.random() < world.engagement_rate(a))
    if not engaged:
        return False, 0.0
    mean = float(world.mean_log_value(np.atleast_2d(latent_row), np.array([a]))[0])
    return True, float(np.exp(mean + rng.normal(0.0, world.noise_sd)))


def sample_outcomes(
    world: SyntheticWorld,
    latent: np.ndarray,
    depths: np.ndarray,
    rng: np.random.Generator | None = None,
    *,
    noise: np.ndarray | None = None,
    engage_u: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized outcomes; ``noise`` and ``engage_u`` allow common random
    numbers to be shared across policies being compared."""
    n = latent.shape[0]
    if noise is None:
        noise = rng.standard_normal(n)
    if engage_u is None:
        engage_u = rng.random(n)
    depths = np.asarray(depths, dtype=float)
    engaged = engage_u < world.engagement_rate(depths)
    mean = world.mean_log_value(latent, depths)
    values = np.where(engaged, np.exp(mean + world.noise_sd * noise), 0.0)
    return engaged, values


@dataclass
class ReplayEvent:
    """One logged campaign record; value is positive iff engaged."""

    customer_id: int
    features: np.ndarray
    depth: float
    engaged: bool
    full_price_value: float

    def __post_init__(self):
        if self.engaged != (self.full_price_value > 0.0):
            raise ValueError(
                f"event {self.customer_id}: full_price_value must be positive "
                "exactly when engaged"
            )


def generate_log(
    world: SyntheticWorld,
    n_customers: int,
    action_set: Sequence[float],
    rng: np.random.Generator,
    start_id: int = 0,
) -> list[ReplayEvent]:
    """A campaign with depths assigned uniformly at random."""
    actions = np.asarray(action_set, dtype=float)
    if actions.size == 0:
        raise ValueError("action_set must be non-empty")
    cust = world.sample_customers(n_customers, rng, start_id)
    depths = actions[rng.integers(0, actions.size, n_customers)]
    engaged, values = sample_outcomes(world, cust.latent, depths, rng)
    return [
        ReplayEvent(
            customer_id=int(cust.ids[i]),
            features=cust.features[i],
            depth=float(depths[i]),
            engaged=bool(engaged[i]),
            full_price_value=float(values[i]),
        )
        for i in range(n_customers)
    ]


def write_log(events: Sequence[ReplayEvent], path, extra_meta: dict | None = None) -> None:
    """JSONL export: one header line, then one event per line."""
    path = Path(path)
    n_features = int(events[0].features.shape[0]) if events else 0
    header = {
        "format": LOG_FORMAT,
        "version": LOG_VERSION,
        "n_features": n_features,
        "n_events": len(events),
    }
    if extra_meta:
        header.update(extra_meta)
    with path.open("w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for ev in events:
            fh.write(
                json.dumps(
                    {
                        "id": ev.customer_id,
                        "features": [float(x) for x in ev.features],
                        "depth": ev.depth,
                        "engaged": ev.engaged,
                        "full_price_value": ev.full_price_value,
                    }
                )
                + "\n"
            )


def read_log(path) -> tuple[dict, list[ReplayEvent]]:
    path = Path(path)
    with path.open() as fh:
        header = json.loads(fh.readline())
        if header.get("format") != LOG_FORMAT:
            raise ValueError(f"{path} is not a {LOG_FORMAT} file")
        if header.get("version") != LOG_VERSION:
            raise ValueError(f"unsupported log version {header.get('version')}")
        events = []
        for line in fh:
            rec = json.loads(line)
            events.append(
                ReplayEvent(
                    customer_id=int(rec["id"]),
                    features=np.asarray(rec["features"], dtype=float),
                    depth=float(rec["depth"]),
                    engaged=bool(rec["engaged"]),
                    full_price_value=float(rec["full_price_value"]),
                )
            )
    return header, events


def engagement_from_log(events: Sequence[ReplayEvent], action_set: Sequence[float]) -> np.ndarray:
    """Historical per-depth engagement averages (Laplace-smoothed)."""
    actions = np.asarray(action_set, dtype=float)
    hits = np.ones(actions.size)
    totals = np.full(actions.size, 2.0)
    for ev in events:
        k = int(np.argmin(np.abs(actions - ev.depth)))
        if abs(actions[k] - ev.depth) < 1e-9:
            totals[k] += 1.0
            hits[k] += 1.0 if ev.engaged else 0.0
    return hits / totals


def uniform_resample(
    events: Sequence[ReplayEvent],
    rng: np.random.Generator,
    action_set: Sequence[float] | None = None,
) -> list[ReplayEvent]:
    """Downsample so every depth appears exactly min-count times.

    The result is shuffled; a depth from ``action_set`` with no events
    raises an error naming the depth.
    """
    by_depth: dict[float, list[int]] = {}
    for i, ev in enumerate(events):
        by_depth.setdefault(ev.depth, []).append(i)
    if action_set is not None:
        for a in action_set:
            if float(a) not in by_depth:
                raise ValueError(f"no logged events for action {float(a)}")
    if not by_depth:
        return []
    m = min(len(v) for v in by_depth.values())
    keep: list[int] = []
    for depth in sorted(by_depth):
        idx = by_depth[depth]
        chosen = rng.choice(len(idx), size=m, replace=False)
        keep.extend(idx[j] for j in chosen)
    keep = [keep[j] for j in rng.permutation(len(keep))]
    return [events[i] for i in keep]


@dataclass
class ReplayBatch:
    index: int
    n_candidates: int
    n_matched: int
    n_engaged_matched: int
    mean_discounted_value: float
    abv_engaged: float
    empty: bool


@dataclass
class ReplayResult:
    batches: list[ReplayBatch]
    posterior: PosteriorState

    @property
    def n_matched(self) -> int:
        return sum(b.n_matched for b in self.batches)

    @property
    def matched_rewards(self) -> np.ndarray:
        return np.asarray(self._rewards)

    _rewards: list = field(default_factory=list)

    def overall_mean(self) -> float:
        r = self.matched_rewards
        return float(r.mean()) if r.size else float("nan")


def replay_evaluate(
    policy,
    events: Sequence[ReplayEvent],
    batch_size: int,
    posterior: PosteriorState,
    *,
    context_fn: Callable[[np.ndarray], np.ndarray],
    rbf: RbfConfig,
    action_set: Sequence[float],
    capacity_profile: Sequence[float],
    w: float,
    rng: np.random.Generator,
    engagement_rates: np.ndarray | None = None,
) -> ReplayResult:
    """Batch rejection-sampling replay over a uniformly randomized log.

    Events stream into candidate batches; the policy forms its intended
    allocation for each batch through the integer program, and only
    events whose logged depth equals the intended depth are retained.
    Retained rewards (discounted value, zero when not engaged) form the
    evaluation sample; retained engaged events update the posterior.
    Rejected events are discarded without touching the posterior.

    ``policy`` is either the string ``"random"`` or a callable
    ``(posterior, contexts, actions, rbf, rng) -> ScoreMatrix``.
    """
    from .allocator import AllocationProblem, solve  # deferred to avoid a cycle

    actions = np.asarray(action_set, dtype=float)
    profile = np.asarray(capacity_profile, dtype=float)
    if profile.shape != actions.shape:
        raise ValueError("capacity profile must match the action set")
    if engagement_rates is None:
        engagement_rates = engagement_from_log(events, actions)

    result = ReplayResult(batches=[], posterior=posterior)
    for b, start in enumerate(range(0, len(events), batch_size)):
        chunk = list(events[start : start + batch_size])
        feats = np.stack([ev.features for ev in chunk])
        contexts = context_fn(feats)
        caps = np.floor(profile * len(chunk)).astype(int)
        if isinstance(policy, str) and policy == "random":
            intended = random_assignment(
                [ev.customer_id for ev in chunk], actions, caps, rng
            )
        else:
            scores: ScoreMatrix = policy(posterior, contexts, actions, rbf, rng)
            problem = AllocationProblem(
                scores=scores, w=w, engagement=engagement_rates, capacities=caps
            )
            intended = solve(problem)
        logged = np.asarray([ev.depth for ev in chunk])
        with np.errstate(invalid="ignore"):
            matched = np.abs(intended.depths - logged) < 1e-12
        matched &= intended.chosen >= 0

        rewards = [
            chunk[i].full_price_value * (1.0 - chunk[i].depth)
            for i in np.flatnonzero(matched)
        ]
        result._rewards.extend(rewards)
        engaged_idx = [i for i in np.flatnonzero(matched) if chunk[i].engaged]
        if engaged_idx:
            phis = np.vstack(
                [
                    compose_features_matrix(
                        contexts[i : i + 1], encode_rbf(chunk[i].depth, rbf)
                    )
                    for i in engaged_idx
                ]
            )
            logs = np.log([chunk[i].full_price_value for i in engaged_idx])
            update_posterior(posterior, phis, logs)
        engaged_rewards = [
            chunk[i].full_price_value * (1.0 - chunk[i].depth) for i in engaged_idx
        ]
        result.batches.append(
            ReplayBatch(
                index=b,
                n_candidates=len(chunk),
                n_matched=int(matched.sum()),
                n_engaged_matched=len(engaged_idx),
                mean_discounted_value=float(np.mean(rewards)) if rewards else float("nan"),
                abv_engaged=float(np.mean(engaged_rewards)) if engaged_rewards else 0.0,
                empty=not rewards,
            )
        )
    return result
