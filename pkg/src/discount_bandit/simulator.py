"""Multi-batch constrained-bandit experiments on the synthetic world.

Each experiment runs ``mc_iterations`` independent Monte-Carlo
repetitions of a batched campaign loop: sample customers, score them
under a policy, allocate depths through the integer program, observe
outcomes, update the posterior.  Customer draws and outcome noise are
keyed by (seed, iteration, batch) only, so different policies compared
under the same seed see identical customers and identical latent demand
noise — paired comparisons with common random numbers.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy import stats

from .actions import RbfConfig, encode_rbf
from .allocator import AllocationProblem, solve
from .embeddings import EmbeddingModel
from .environment import (
    SyntheticWorld,
    engagement_from_log,
    generate_log,
    sample_outcomes,
)
from .policies import (
    epsilon_greedy_scores,
    greedy_scores,
    random_assignment,
    ts_scores,
    ucb_scores,
)
from .reward import (
    PosteriorState,
    compose_features_matrix,
    composed_dim,
    init_posterior,
    load_posterior,
    update_posterior,
)

__all__ = [
    "ExperimentConfig",
    "LearningCurve",
    "PolicyComparison",
    "UlccResult",
    "compare_policies",
    "compute_abv",
    "run_experiment",
    "run_ulcc",
    "POLICY_NAMES",
]

POLICY_NAMES = ("ts", "ucb", "egreedy", "greedy", "random")

# rng stream tags: every generator is seeded by
# SeedSequence([seed, tag, ...indices]) so streams are stable regardless
# of execution order (a policy's private stream also folds in its id).
_S_CUSTOMERS = 1
_S_OUTCOME = 2
_S_POLICY = 3
_S_WARM = 4
_S_LEARNER = 5

_POLICY_IDS = {name: i for i, name in enumerate(POLICY_NAMES + ("ulcc_consumer", "ulcc_learner"))}


@dataclass
class ExperimentConfig:
    """Everything a simulation run needs apart from the world itself."""

    policy: str = "ts"
    batch_size: int = 500
    n_batches: int = 40
    mc_iterations: int = 20
    start_mode: str = "warm"  # warm | cold
    warm_batches: int = 2
    warm_start_source: str | None = None  # posterior .npz or replay-log path
    actions: tuple[float, ...] = (0.1, 0.2, 0.3, 0.4, 0.5)
    capacity_profile: tuple[float, ...] = (0.3, 0.25, 0.2, 0.15, 0.1)
    w: float = 2.0
    prior_scale: float = 1.0
    beta: float = 1.0
    ucb_beta: float = 1.0
    epsilon: float = 0.1
    seed: int = 0
    rbf: RbfConfig = field(default_factory=RbfConfig)
    context_source: str = "true"  # true | dnn
    workers: int = 1

    def __post_init__(self):
        if self.batch_size < 1 or self.mc_iterations < 1 or self.n_batches < 1:
            raise ValueError("batch_size, n_batches and mc_iterations must be >= 1")
        if self.start_mode not in ("warm", "cold"):
            raise ValueError(f"unknown start_mode {self.start_mode!r}")
        if len(self.capacity_profile) != len(self.actions):
            raise ValueError("capacity profile must match the action set")
        if self.policy not in POLICY_NAMES:
            raise ValueError(f"unknown policy {self.policy!r}; pick from {POLICY_NAMES}")


@dataclass
class LearningCurve:
    """Per-batch ABV across Monte-Carlo iterations, raw and scaled.

    Scaling divides by the Random policy's overall mean, so Random's own
    scaled mean is 1 by construction.
    """

    policy: str
    raw: np.ndarray  # (mc_iterations, n_batches)
    random_mean: float
    n_engaged: np.ndarray | None = None

    @property
    def scaled(self) -> np.ndarray:
        return self.raw / self.random_mean

    @property
    def batch_means(self) -> np.ndarray:
        return self.scaled.mean(axis=0)

    @property
    def batch_se(self) -> np.ndarray:
        m = self.raw.shape[0]
        return self.scaled.std(axis=0, ddof=1) / np.sqrt(m) if m > 1 else np.zeros(self.raw.shape[1])

    def final_window_means(self, window: int = 10) -> np.ndarray:
        """Per-iteration mean scaled ABV over the last ``window`` batches."""
        return self.scaled[:, -window:].mean(axis=1)


def compute_abv(values: np.ndarray, depths: np.ndarray, engaged: np.ndarray) -> float:
    """Average basket value: mean of F * (1 - a) over engaged customers.

    Returns 0.0 when nobody engaged (callers flag that case separately);
    invariant to customer ordering.
    """
    values = np.asarray(values, dtype=float)
    depths = np.asarray(depths, dtype=float)
    engaged = np.asarray(engaged, dtype=bool)
    if not engaged.any():
        return 0.0
    return float(np.mean(values[engaged] * (1.0 - depths[engaged])))


class _EngagementTracker:
    """Running per-depth engagement averages with a Laplace prior."""

    def __init__(self, n_actions: int):
        self.hits = np.ones(n_actions)
        self.totals = np.full(n_actions, 2.0)

    def seed_from_log(self, events, actions) -> None:
        rates = engagement_from_log(events, actions)
        # engagement_from_log already smooths; keep its counts lightweight
        counts = np.zeros(len(actions))
        for ev in events:
            k = int(np.argmin(np.abs(np.asarray(actions) - ev.depth)))
            counts[k] += 1
        self.totals = counts + 2.0
        self.hits = rates * self.totals

    def update(self, action_idx: np.ndarray, engaged: np.ndarray) -> None:
        np.add.at(self.totals, action_idx, 1.0)
        np.add.at(self.hits, action_idx[engaged], 1.0)

    @property
    def rates(self) -> np.ndarray:
        return self.hits / self.totals


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


def _context_fn(world: SyntheticWorld, config: ExperimentConfig, model: EmbeddingModel | None):
    if config.context_source == "true":
        return lambda cust: cust.embeddings
    if config.context_source == "dnn":
        if model is None:
            raise ValueError("context_source='dnn' requires an embedding model")
        return lambda cust: model.embed(cust.features)
    raise ValueError(f"unknown context_source {config.context_source!r}")


def _fresh_posterior(config: ExperimentConfig, world: SyntheticWorld) -> PosteriorState:
    d = composed_dim(world.config.embed_dim, config.rbf.dim)
    return init_posterior(d, prior_scale=config.prior_scale, beta=config.beta)


def _warm_start(
    world: SyntheticWorld,
    config: ExperimentConfig,
    it: int,
    context_fn,
) -> tuple[PosteriorState, _EngagementTracker]:
    """Posterior and engagement averages from an earlier campaign.

    By default a fresh randomized-campaign log is generated per
    iteration; alternatively ``warm_start_source`` names a posterior
    checkpoint (.npz) or a replay log (JSONL) to start from.
    """
    posterior = _fresh_posterior(config, world)
    tracker = _EngagementTracker(len(config.actions))
    if config.start_mode == "cold":
        return posterior, tracker

    if config.warm_start_source and str(config.warm_start_source).endswith(".npz"):
        loaded = load_posterior(config.warm_start_source)
        if loaded.dim != posterior.dim:
            raise ValueError("warm-start posterior dimension mismatch")
        loaded.beta = config.beta
        return loaded, tracker

    if config.warm_start_source:
        from .environment import read_log

        _, events = read_log(config.warm_start_source)
    else:
        rng = _rng(config.seed, _S_WARM, it)
        events = generate_log(
            world, config.warm_batches * config.batch_size, config.actions, rng
        )
    tracker.seed_from_log(events, config.actions)
    engaged = [ev for ev in events if ev.engaged]
    if engaged:
        feats = np.stack([ev.features for ev in engaged])
        contexts = context_fn(_as_customers(world, feats))
        for k, a in enumerate(config.actions):
            mask = [abs(ev.depth - a) < 1e-12 for ev in engaged]
            if any(mask):
                idx = np.flatnonzero(mask)
                phis = compose_features_matrix(contexts[idx], encode_rbf(a, config.rbf))
                logs = np.log([engaged[i].full_price_value for i in idx])
                update_posterior(posterior, phis, logs)
    return posterior, tracker


def _as_customers(world: SyntheticWorld, features: np.ndarray):
    """Wrap raw features in the Customers view used by context functions."""
    from .environment import Customers

    latent = world.latent_of(features)
    return Customers(
        ids=np.arange(features.shape[0]),
        features=features,
        latent=latent,
        embeddings=latent[:, : world.config.embed_dim],
    )


def _score(policy: str, config: ExperimentConfig, posterior, contexts, rng):
    if policy == "ts":
        return ts_scores(posterior, contexts, config.actions, config.rbf, rng)
    if policy == "greedy":
        return greedy_scores(posterior, contexts, config.actions, config.rbf)
    if policy == "ucb":
        return ucb_scores(posterior, contexts, config.actions, config.rbf, config.ucb_beta)
    if policy == "egreedy":
        return epsilon_greedy_scores(
            posterior, contexts, config.actions, config.rbf, config.epsilon, rng
        )
    raise ValueError(f"policy {policy!r} has no score function")


def _update_from_outcomes(
    posterior: PosteriorState,
    config: ExperimentConfig,
    contexts: np.ndarray,
    chosen: np.ndarray,
    engaged: np.ndarray,
    values: np.ndarray,
) -> None:
    for k, a in enumerate(config.actions):
        mask = engaged & (chosen == k)
        if mask.any():
            phis = compose_features_matrix(contexts[mask], encode_rbf(a, config.rbf))
            update_posterior(posterior, phis, np.log(values[mask]))


def _run_iteration(
    world: SyntheticWorld,
    config: ExperimentConfig,
    policy: str,
    it: int,
    model: EmbeddingModel | None = None,
) -> tuple[np.ndarray, np.ndarray, PosteriorState]:
    """One Monte-Carlo iteration of one policy; returns per-batch ABV,
    per-batch engaged counts and the final posterior."""
    context_fn = _context_fn(world, config, model)
    posterior, tracker = _warm_start(world, config, it, context_fn)
    pol_id = _POLICY_IDS[policy]
    abvs = np.zeros(config.n_batches)
    engaged_counts = np.zeros(config.n_batches, dtype=int)
    n = config.batch_size
    caps = np.floor(np.asarray(config.capacity_profile) * n).astype(int)
    for b in range(config.n_batches):
        cust = world.sample_customers(n, _rng(config.seed, _S_CUSTOMERS, it, b))
        out_rng = _rng(config.seed, _S_OUTCOME, it, b)
        noise = out_rng.standard_normal(n)
        engage_u = out_rng.random(n)
        contexts = context_fn(cust)
        pol_rng = _rng(config.seed, _S_POLICY, pol_id, it, b)
        if policy == "random":
            assignment = random_assignment(list(cust.ids), config.actions, caps, pol_rng)
        else:
            scores = _score(policy, config, posterior, contexts, pol_rng)
            problem = AllocationProblem(
                scores=scores, w=config.w, engagement=tracker.rates, capacities=caps
            )
            assignment = solve(problem)
        chosen = assignment.chosen
        mask = chosen >= 0
        depths = np.asarray(config.actions)[chosen[mask]]
        engaged, values = sample_outcomes(
            world,
            cust.latent[mask],
            depths,
            noise=noise[mask],
            engage_u=engage_u[mask],
        )
        abvs[b] = compute_abv(values, depths, engaged)
        engaged_counts[b] = int(engaged.sum())
        tracker.update(chosen[mask], engaged)
        if policy != "random":
            _update_from_outcomes(
                posterior, config, contexts[mask], chosen[mask], engaged, values
            )
    return abvs, engaged_counts, posterior


def _iteration_task(args):
    world, config, policy, it, model = args
    abvs, engaged, _ = _run_iteration(world, config, policy, it, model)
    return it, abvs, engaged


def _run_matrix(
    world: SyntheticWorld,
    config: ExperimentConfig,
    policy: str,
    model: EmbeddingModel | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """(mc_iterations, n_batches) raw ABV matrix for one policy."""
    m = config.mc_iterations
    raw = np.zeros((m, config.n_batches))
    engaged = np.zeros((m, config.n_batches), dtype=int)
    if config.workers > 1:
        tasks = [(world, config, policy, it, model) for it in range(m)]
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            for it, abvs, eng in pool.map(_iteration_task, tasks):
                raw[it] = abvs
                engaged[it] = eng
    else:
        for it in range(m):
            abvs, eng, _ = _run_iteration(world, config, policy, it, model)
            raw[it] = abvs
            engaged[it] = eng
    return raw, engaged


def run_experiment(
    config: ExperimentConfig,
    world: SyntheticWorld,
    *,
    embedding_model: EmbeddingModel | None = None,
) -> LearningCurve:
    """Learning curve for ``config.policy``, scaled against a Random
    reference run under the same seeds."""
    raw, engaged = _run_matrix(world, config, config.policy, embedding_model)
    if config.policy == "random":
        random_raw = raw
    else:
        random_raw, _ = _run_matrix(world, config, "random", embedding_model)
    return LearningCurve(
        policy=config.policy,
        raw=raw,
        random_mean=float(random_raw.mean()),
        n_engaged=engaged,
    )


@dataclass
class PolicyComparison:
    """Shared-seed comparison of several policies on one world."""

    curves: dict[str, LearningCurve]
    final_window: int
    paired_pvalues: dict[str, float]

    def rows(self) -> list[tuple]:
        """(iteration, batch, policy, raw ABV, scaled ABV) rows."""
        out = []
        for name in self.curves:
            curve = self.curves[name]
            scaled = curve.scaled
            for it in range(curve.raw.shape[0]):
                for b in range(curve.raw.shape[1]):
                    out.append((it, b, name, float(curve.raw[it, b]), float(scaled[it, b])))
        return out

    def summary(self) -> dict:
        out = {"final_window": self.final_window, "policies": {}}
        for name, curve in self.curves.items():
            finals = curve.final_window_means(self.final_window)
            out["policies"][name] = {
                "scaled_mean": float(curve.scaled.mean()),
                "final_window_scaled_mean": float(finals.mean()),
                "final_window_se": float(finals.std(ddof=1) / np.sqrt(len(finals)))
                if len(finals) > 1
                else 0.0,
            }
        out["paired_pvalues_ts_greater"] = self.paired_pvalues
        return out


def compare_policies(
    config: ExperimentConfig,
    world: SyntheticWorld,
    policies: Sequence[str] = POLICY_NAMES,
    *,
    final_window: int = 10,
    embedding_model: EmbeddingModel | None = None,
) -> PolicyComparison:
    """Run several policies under common random numbers.

    All policies see identical customer batches and identical outcome
    noise; the paired p-values test TS's final-window scaled ABV against
    each other policy's (one-sided, TS greater) across iterations.
    """
    policies = list(policies)
    matrices = {}
    for name in policies:
        matrices[name], _ = _run_matrix(world, config, name, embedding_model)
    if "random" in matrices:
        random_raw = matrices["random"]
    else:
        random_raw, _ = _run_matrix(world, config, "random", embedding_model)
    random_mean = float(random_raw.mean())
    curves = {
        name: LearningCurve(policy=name, raw=matrices[name], random_mean=random_mean)
        for name in policies
    }
    pvalues = {}
    if "ts" in curves:
        ts_final = curves["ts"].final_window_means(final_window)
        for name, curve in curves.items():
            if name == "ts":
                continue
            other = curve.final_window_means(final_window)
            pvalues[name] = float(
                stats.ttest_rel(ts_final, other, alternative="greater").pvalue
            )
    return PolicyComparison(curves=curves, final_window=final_window, paired_pvalues=pvalues)


@dataclass
class UlccResult:
    """TS-IP versus the unconstrained-learner benchmark.

    ``degradation`` is (mean ULCC ABV - mean TS-IP ABV) / mean ULCC ABV
    over all batches and iterations; the p-value compares per-iteration
    first-half and second-half degradations (paired, two-sided).
    """

    ts_ip: LearningCurve
    ulcc: LearningCurve
    degradation: float
    halves_pvalue: float


def run_ulcc(
    config: ExperimentConfig,
    world: SyntheticWorld,
    *,
    embedding_model: EmbeddingModel | None = None,
) -> UlccResult:
    """Benchmark TS-IP against the two-headed ULCC agent.

    The ULCC Learner takes unconstrained per-customer Thompson argmax
    actions and its outcomes are the only posterior updates; the
    Consumer allocates through the usual integer program with the
    current posterior and its harvested outcomes are the only ABV
    entries.  TS-IP runs under the same customer and outcome streams.
    """
    context_fn = _context_fn(world, config, embedding_model)
    m = config.mc_iterations
    tsip_raw = np.zeros((m, config.n_batches))
    ulcc_raw = np.zeros((m, config.n_batches))
    n = config.batch_size
    caps = np.floor(np.asarray(config.capacity_profile) * n).astype(int)
    actions_arr = np.asarray(config.actions)

    for it in range(m):
        tsip_raw[it], _, _ = _run_iteration(world, config, "ts", it, embedding_model)
        posterior, tracker = _warm_start(world, config, it, context_fn)
        for b in range(config.n_batches):
            cust = world.sample_customers(n, _rng(config.seed, _S_CUSTOMERS, it, b))
            out_rng = _rng(config.seed, _S_OUTCOME, it, b)
            noise = out_rng.standard_normal(n)
            engage_u = out_rng.random(n)
            contexts = context_fn(cust)

            # consumer: constrained allocation, harvested rewards only
            c_rng = _rng(config.seed, _S_POLICY, _POLICY_IDS["ulcc_consumer"], it, b)
            scores = ts_scores(posterior, contexts, config.actions, config.rbf, c_rng)
            problem = AllocationProblem(
                scores=scores, w=config.w, engagement=tracker.rates, capacities=caps
            )
            assignment = solve(problem)
            mask = assignment.chosen >= 0
            depths = actions_arr[assignment.chosen[mask]]
            engaged, values = sample_outcomes(
                world, cust.latent[mask], depths, noise=noise[mask], engage_u=engage_u[mask]
            )
            ulcc_raw[it, b] = compute_abv(values, depths, engaged)
            tracker.update(assignment.chosen[mask], engaged)

            # learner: unconstrained argmax actions, posterior updates only
            l_rng = _rng(config.seed, _S_POLICY, _POLICY_IDS["ulcc_learner"], it, b)
            l_scores = ts_scores(posterior, contexts, config.actions, config.rbf, l_rng)
            l_chosen = np.argmax(l_scores.values, axis=1)
            l_depths = actions_arr[l_chosen]
            learn_rng = _rng(config.seed, _S_LEARNER, it, b)
            l_engaged, l_values = sample_outcomes(world, cust.latent, l_depths, learn_rng)
            _update_from_outcomes(
                posterior, config, contexts, l_chosen, l_engaged, l_values
            )

    random_raw, _ = _run_matrix(world, config, "random")
    random_mean = float(random_raw.mean())
    ts_curve = LearningCurve(policy="ts", raw=tsip_raw, random_mean=random_mean)
    ulcc_curve = LearningCurve(policy="ulcc", raw=ulcc_raw, random_mean=random_mean)

    degradation = float((ulcc_raw.mean() - tsip_raw.mean()) / ulcc_raw.mean())
    half = config.n_batches // 2
    with np.errstate(invalid="ignore", divide="ignore"):
        deg_first = (ulcc_raw[:, :half].mean(axis=1) - tsip_raw[:, :half].mean(axis=1)) / ulcc_raw[
            :, :half
        ].mean(axis=1)
        deg_second = (
            ulcc_raw[:, half:].mean(axis=1) - tsip_raw[:, half:].mean(axis=1)
        ) / ulcc_raw[:, half:].mean(axis=1)
    pvalue = float(stats.ttest_rel(deg_first, deg_second).pvalue)
    return UlccResult(
        ts_ip=ts_curve, ulcc=ulcc_curve, degradation=degradation, halves_pvalue=pvalue
    )
