"""Exact discount allocation as a min-cost max-profit flow.

The allocation problem assigns at most one discount depth per customer,
uses each depth at most ``N_a`` times, and maximizes

    sum over chosen (i, a) of (w * F[i,a] * (1 - a) - F[i,a] * a) * e_a

i.e. importance-weighted expected revenue minus markdown cost, scaled by
the depth's engagement rate.  The constraint matrix is an assignment
structure, so the LP relaxation has integral optima; the solver runs
successive shortest paths on the bipartite customer-depth graph
(contracted over customers, with an implicit zero-cost skip arc per
customer) and is exact because costs are scaled to integers first.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .policies import ScoreMatrix

__all__ = [
    "AllocationProblem",
    "Assignment",
    "allocation_table",
    "assignment_objective",
    "coefficient_matrix",
    "objective_coefficient",
    "solve",
    "solve_bruteforce",
    "solve_with_budget",
]

logger = logging.getLogger(__name__)

# Integer cost scaling: coefficients are multiplied by a power of two and
# rounded so the largest magnitude lands near 2**_COST_BITS.  The relative
# quantization error (~2**-41) is below float64 summation noise for any
# realistic instance, which keeps the integer optimum aligned with the
# float optimum.
_COST_BITS = 40


@dataclass
class AllocationProblem:
    """One integer-program instance: scores plus campaign controls.

    ``w`` trades revenue maximisation against cost minimisation,
    ``engagement`` holds the per-depth purchase-completion rates e_a,
    and ``capacities`` the per-depth allocation limits N_a.
    """

    scores: ScoreMatrix
    w: float
    engagement: np.ndarray
    capacities: np.ndarray

    def __post_init__(self):
        k = len(self.scores.actions)
        self.engagement = np.asarray(self.engagement, dtype=float)
        self.capacities = np.asarray(self.capacities)
        if self.engagement.shape != (k,) or self.capacities.shape != (k,):
            raise ValueError("engagement and capacities must have one entry per action")
        if np.any(self.engagement < 0.0) or np.any(self.engagement > 1.0):
            raise ValueError("engagement rates must lie in [0, 1]")
        if np.any(self.capacities < 0) or np.any(self.capacities != np.floor(self.capacities)):
            raise ValueError("capacities must be non-negative integers")
        self.capacities = self.capacities.astype(int)
        if self.w < 0.0:
            raise ValueError(f"importance weight w must be non-negative, got {self.w}")

    @property
    def n_customers(self) -> int:
        return self.scores.values.shape[0]

    @property
    def n_actions(self) -> int:
        return self.scores.values.shape[1]


@dataclass
class Assignment:
    """Solution of an allocation problem.

    ``chosen[i]`` is the action index for customer i, or -1 when the
    customer keeps no code.  ``objective`` is the total coefficient over
    chosen pairs (None for score-free assignments such as the random
    baseline).
    """

    chosen: np.ndarray
    actions: tuple[float, ...]
    customers: list
    objective: Optional[float] = None

    @property
    def depths(self) -> np.ndarray:
        """Per-customer assigned depth, NaN when unassigned."""
        out = np.full(self.chosen.shape[0], np.nan)
        mask = self.chosen >= 0
        out[mask] = np.asarray(self.actions)[self.chosen[mask]]
        return out

    def usage(self) -> np.ndarray:
        """Number of customers assigned to each action."""
        return np.bincount(
            self.chosen[self.chosen >= 0], minlength=len(self.actions)
        )


def objective_coefficient(f_tilde: float, a: float, w: float, e_a: float) -> float:
    """Objective contribution of assigning depth ``a`` at pseudo-value F.

    Expected revenue is F*(1-a), markdown cost is F*a; both are scaled
    by the engagement rate, giving (w*F*(1-a) - F*a) * e_a.
    """
    if f_tilde <= 0.0:
        raise ValueError(f"pseudo basket value must be positive, got {f_tilde}")
    return (w * f_tilde * (1.0 - a) - f_tilde * a) * e_a


def coefficient_matrix(problem: AllocationProblem) -> np.ndarray:
    """(I, K) matrix of objective coefficients."""
    a = np.asarray(problem.scores.actions, dtype=float)
    margin = problem.w * (1.0 - a) - a
    return problem.scores.values * margin[None, :] * problem.engagement[None, :]


def assignment_objective(coeffs: np.ndarray, chosen: np.ndarray) -> float:
    """Canonical objective: coefficients summed in ascending customer order.

    Both solvers report objectives through this helper so that equal
    assignments produce bit-identical totals.
    """
    total = 0.0
    for i, c in enumerate(chosen):
        if c >= 0:
            total += float(coeffs[i, c])
    return total


def _scaled_int_costs(coeffs: np.ndarray) -> np.ndarray:
    """Coefficients scaled by a power of two and rounded to int64."""
    maxabs = float(np.max(np.abs(coeffs))) if coeffs.size else 0.0
    if maxabs == 0.0 or not np.isfinite(maxabs):
        if not np.isfinite(maxabs):
            raise ValueError("allocation coefficients must be finite")
        return np.zeros(coeffs.shape, dtype=np.int64)
    scale = 2.0 ** (_COST_BITS - int(np.ceil(np.log2(maxabs))))
    return np.rint(coeffs * scale).astype(np.int64)


class _FlowSolver:
    """Successive shortest paths on the customer-depth graph.

    Customers are contracted away: the working graph has one node per
    depth plus a skip node of unlimited capacity and zero profit.  Arc
    (a -> b) carries the cheapest cost of moving one currently-assigned
    customer from a to b; inserting a new customer is a shortest-path
    search over these nodes followed by an augmentation along the
    alternating path.  Node potentials keep reduced costs non-negative,
    the textbook invariant that makes each insertion a plain Dijkstra
    and the final flow a global optimum.

    The per-node loops run over at most K+1 elements, so they use plain
    Python lists; numpy only handles the member-row minimums.
    """

    INF = 2**62

    def __init__(self, profit_int: np.ndarray, capacities: np.ndarray):
        n, k = profit_int.shape
        # column layout: k real depths then the skip column (zero profit)
        self.cost = np.hstack([-profit_int, np.zeros((n, 1), dtype=np.int64)])
        self.ncols = k + 1
        self.caps = [int(c) for c in capacities] + [n + 1]
        self.counts = [0] * self.ncols
        self.match = np.full(n, -1, dtype=np.int64)
        self.members: list[list[int]] = [[] for _ in range(self.ncols)]
        self.pot = [0] * self.ncols
        self.W = [[self.INF] * self.ncols for _ in range(self.ncols)]
        self.Warg = [[-1] * self.ncols for _ in range(self.ncols)]
        self.dirty = set(range(self.ncols))

    def _refresh_row(self, a: int) -> None:
        rows = self.members[a]
        if not rows:
            self.W[a] = [self.INF] * self.ncols
            self.Warg[a] = [-1] * self.ncols
        else:
            idx = np.fromiter(rows, dtype=np.int64, count=len(rows))
            sub = self.cost[idx]  # move j from a to b costs cost[j,b]-cost[j,a]
            diff = sub - sub[:, a][:, None]
            pos = diff.argmin(axis=0)
            self.W[a] = diff[pos, np.arange(self.ncols)].tolist()
            self.Warg[a] = idx[pos].tolist()
        self.W[a][a] = self.INF

    def insert(self, i: int) -> None:
        if self.dirty:
            for a in self.dirty:
                self._refresh_row(a)
            self.dirty.clear()
        ncols, INF, pot = self.ncols, self.INF, self.pot
        cost_i = self.cost[i].tolist()
        dist = [cost_i[a] - pot[a] for a in range(ncols)]  # reduced labels
        parent = [-1] * ncols  # -1: entered straight from the source
        visited = [False] * ncols
        for _ in range(ncols):
            u, best = -1, INF
            for a in range(ncols):
                if not visited[a] and dist[a] < best:
                    u, best = a, dist[a]
            if u < 0:
                break
            visited[u] = True
            Wu = self.W[u]
            base = best + pot[u]
            for b in range(ncols):
                if not visited[b] and Wu[b] < INF:
                    nd = base + Wu[b] - pot[b]
                    if nd < dist[b]:
                        dist[b] = nd
                        parent[b] = u

        e, ebest = -1, INF
        for a in range(ncols):
            if visited[a] and self.counts[a] < self.caps[a]:
                td = dist[a] + pot[a]  # true path cost
                if td < ebest:
                    e, ebest = a, td

        # collect the alternating path source -> a0 -> ... -> e
        path = []
        node = e
        while node != -1:
            path.append(node)
            node = parent[node]
        path.reverse()

        moves = [(self.Warg[a][b], a, b) for a, b in zip(path, path[1:])]
        first = path[0]
        self.match[i] = first
        self.members[first].append(i)
        self.dirty.add(first)
        for j, a, b in moves:
            self.members[a].remove(j)
            self.members[b].append(j)
            self.match[j] = b
            self.dirty.add(a)
            self.dirty.add(b)
        self.counts[e] += 1

        bound = dist[e]
        for a in range(ncols):
            pot[a] += min(dist[a], bound) if visited[a] else bound


def solve(problem: AllocationProblem) -> Assignment:
    """Objective-optimal feasible assignment via min-cost flow.

    Customers whose best coefficient is negative stay unassigned (the
    skip arc beats every profitable-looking move).  Ties are resolved
    deterministically: customers are inserted in index order and lower
    action indices (shallower depths) win equal-cost comparisons.
    """
    coeffs = coefficient_matrix(problem)
    solver = _FlowSolver(_scaled_int_costs(coeffs), problem.capacities)
    for i in range(problem.n_customers):
        solver.insert(i)
    chosen = np.where(solver.match == problem.n_actions, -1, solver.match)
    return Assignment(
        chosen=chosen.astype(int),
        actions=tuple(problem.scores.actions),
        customers=list(problem.scores.customers),
        objective=assignment_objective(coeffs, chosen),
    )


def solve_bruteforce(problem: AllocationProblem) -> Assignment:
    """Exhaustive optimum over all feasible assignments (test oracle).

    Dynamic program over (customer index, remaining capacities); every
    feasible assignment is dominated by some explored state, so the
    result equals full enumeration.  Limited to I <= 12, K <= 4.
    """
    n, k = problem.n_customers, problem.n_actions
    if n > 12 or k > 4:
        raise ValueError(f"instance too large for brute force: I={n}, K={k}")
    coeffs = coefficient_matrix(problem)
    caps0 = tuple(int(min(c, n)) for c in problem.capacities)

    memo: dict[tuple[int, tuple[int, ...]], float] = {}

    def best(i: int, caps: tuple[int, ...]) -> float:
        if i == n:
            return 0.0
        key = (i, caps)
        if key in memo:
            return memo[key]
        value = best(i + 1, caps)  # skip customer i
        for a in range(k):
            if caps[a] > 0:
                caps2 = caps[:a] + (caps[a] - 1,) + caps[a + 1 :]
                value = max(value, coeffs[i, a] + best(i + 1, caps2))
        memo[key] = value
        return value

    chosen = np.full(n, -1, dtype=int)
    caps = caps0
    for i in range(n):
        target = best(i, caps)
        pick, next_caps = -1, caps
        if best(i + 1, caps) != target:
            for a in range(k):
                if caps[a] > 0:
                    caps2 = caps[:a] + (caps[a] - 1,) + caps[a + 1 :]
                    if coeffs[i, a] + best(i + 1, caps2) == target:
                        pick, next_caps = a, caps2
                        break
        chosen[i] = pick
        caps = next_caps
    return Assignment(
        chosen=chosen,
        actions=tuple(problem.scores.actions),
        customers=list(problem.scores.customers),
        objective=assignment_objective(coeffs, chosen),
    )


def solve_with_budget(
    problem: AllocationProblem,
    max_cost: float,
    *,
    tol: float = 1e-6,
    max_iter: int = 60,
) -> Assignment:
    """Allocation under an additional markdown-budget cap (approximate).

    The cap on expected total markdown cost, sum of F*a*e_a over chosen
    pairs, is enforced by a Lagrangian penalty on the cost term found by
    bisection.  The returned assignment is feasible for the budget but
    carries no optimality guarantee (the relaxation can skip over the
    exact knapsack optimum), unlike :func:`solve`.
    """
    if max_cost < 0.0:
        raise ValueError("budget must be non-negative")
    a = np.asarray(problem.scores.actions, dtype=float)
    cost_matrix = problem.scores.values * a[None, :] * problem.engagement[None, :]

    def attempt(lam: float) -> tuple[Assignment, float]:
        coeffs = coefficient_matrix(problem) - lam * cost_matrix
        solver = _FlowSolver(_scaled_int_costs(coeffs), problem.capacities)
        for i in range(problem.n_customers):
            solver.insert(i)
        chosen = np.where(solver.match == problem.n_actions, -1, solver.match)
        spend = assignment_objective(cost_matrix, chosen)
        base = coefficient_matrix(problem)
        return (
            Assignment(
                chosen=chosen.astype(int),
                actions=tuple(problem.scores.actions),
                customers=list(problem.scores.customers),
                objective=assignment_objective(base, chosen),
            ),
            spend,
        )

    assignment, spend = attempt(0.0)
    if spend <= max_cost * (1.0 + tol):
        return assignment
    lo, hi = 0.0, 1.0
    result, spend = attempt(hi)
    while spend > max_cost * (1.0 + tol) and hi < 1e12:
        hi *= 4.0
        result, spend = attempt(hi)
    for _ in range(max_iter):
        mid = (lo + hi) / 2.0
        candidate, spend = attempt(mid)
        if spend <= max_cost * (1.0 + tol):
            result, hi = candidate, mid
        else:
            lo = mid
        if hi - lo < tol * max(1.0, hi):
            break
    logger.info("budget solve used penalty %.6g (approximate)", hi)
    return result


def allocation_table(problem: AllocationProblem, assignment: Assignment) -> list[dict]:
    """Flat per-customer export rows plus per-depth usage versus capacity."""
    coeffs = coefficient_matrix(problem)
    rows = []
    for i, cust in enumerate(assignment.customers):
        c = int(assignment.chosen[i])
        rows.append(
            {
                "customer": cust,
                "depth": assignment.actions[c] if c >= 0 else None,
                "coefficient": float(coeffs[i, c]) if c >= 0 else None,
            }
        )
    usage = assignment.usage()
    for k, depth in enumerate(assignment.actions):
        rows.append(
            {
                "customer": None,
                "depth": depth,
                "coefficient": None,
                "used": int(usage[k]),
                "capacity": int(problem.capacities[k]),
            }
        )
    return rows
