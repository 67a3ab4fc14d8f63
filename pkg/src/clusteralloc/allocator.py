"""Budget solvers over cluster statistics and the strategy library.

The cluster-level program is a multiple-choice knapsack: pick exactly one
arm per cluster, maximize the variance-penalized score

    sum_i omega_i * (mu_r[i,j] - lambda * sd_r[i,j] - kappa * sd_c[i,j])

subject to sum_i omega_i * mu_c[i,j] <= budget. Three methods:

* ``exact_dp`` — certified optimum of the cost-discretized problem. Costs
  are reduced by each row's minimum and the remaining slack is discretized
  into ``buckets`` levels with ceiling rounding, so anything the DP accepts
  is feasible in true cost; solutions whose true cost lies within
  rows * resolution of the budget may be missed (the bound is reported).
* ``lagrangian_sweep`` — bisection on the multiplier of the cost
  constraint, keeping the best feasible primal among visited candidates,
  followed by a greedy single-row improvement pass. Reports the duality
  gap against the best visited dual bound.
* ``brute_force`` — exhaustive enumeration on true costs (small instances).

The same DP solves the individual-level program (`solve_exact_ip`), which
is the deliberately slow oracle the cluster reformulation is measured
against.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .cluster import ClusterStats
from .data import Assignment
from .errors import ClusterAllocError, InfeasibleBudgetError

_METHODS = ("exact_dp", "lagrangian_sweep", "brute_force")
DEFAULT_BUCKETS = 100_000


@dataclass(frozen=True)
class SolverConfig:
    """Risk-aversion factors, budget grid, and solve method."""

    budget_grid: np.ndarray
    lam: float = 0.1
    kappa: float = 0.1
    method: str = "exact_dp"

    def __post_init__(self):
        grid = np.ascontiguousarray(self.budget_grid, dtype=np.float64)
        grid.flags.writeable = False
        object.__setattr__(self, "budget_grid", grid)
        if grid.ndim != 1 or grid.size == 0:
            raise ClusterAllocError("budget_grid must be a nonempty vector")
        if np.any(grid <= 0) or np.any(np.diff(grid) <= 0):
            raise ClusterAllocError("budget_grid entries must be positive and strictly increasing")
        if self.lam < 0 or self.kappa < 0:
            raise ClusterAllocError("variance-aversion factors must be >= 0")
        if self.method not in _METHODS:
            raise ClusterAllocError(f"unknown method {self.method!r}; choose from {_METHODS}")


def score_matrix(stats: ClusterStats, lam: float, kappa: float) -> tuple[np.ndarray, np.ndarray]:
    """(score, cost) matrices of the cluster program, both (k, m)."""
    if lam < 0 or kappa < 0:
        raise ClusterAllocError("variance-aversion factors must be >= 0")
    w = stats.sizes.astype(np.float64)[:, None]
    score = w * (stats.mu_r - lam * stats.sd_r - kappa * stats.sd_c)
    cost = w * stats.mu_c
    return score, cost


def _ordered_sum(matrix: np.ndarray, choice: np.ndarray) -> float:
    # Sequential left-to-right accumulation: the DP builds its objective the
    # same way, so optima agree bitwise with enumeration over the same set.
    total = 0.0
    for i in range(choice.size):
        total += matrix[i, choice[i]]
    return total


def _argmax_rows(u: np.ndarray) -> np.ndarray:
    return np.argmax(u, axis=1)  # first maximum: lowest arm index on ties


def _min_cost_choice(values: np.ndarray, costs: np.ndarray) -> np.ndarray:
    """Per-row cheapest arm; ties broken by score, then lowest index."""
    is_min = costs == costs.min(axis=1, keepdims=True)
    masked = np.where(is_min, values, -np.inf)
    return _argmax_rows(masked)


def _mckp_dp(values: np.ndarray, costs: np.ndarray, budget: float, buckets: int):
    k, m = values.shape
    if m > 127:
        raise ClusterAllocError("DP solver supports at most 127 arms")
    row_min = costs.min(axis=1)
    base = float(row_min.sum())
    if budget < base:
        raise InfeasibleBudgetError(budget, base)
    inc = costs - row_min[:, None]
    slack = budget - base
    info = {"method": "exact_dp", "buckets": buckets}

    if not math.isfinite(budget) or float(inc.max(axis=1).sum()) <= slack:
        choice = _argmax_rows(values)
        info["resolution"] = 0.0
        info["cost_error_bound"] = 0.0
        return choice, info
    if slack <= 0:
        choice = _min_cost_choice(values, costs)
        info["resolution"] = 0.0
        info["cost_error_bound"] = 0.0
        return choice, info

    res = slack / buckets
    w = np.ceil(inc / res - 1e-9).astype(np.int64)
    np.clip(w, 0, None, out=w)
    cap = buckets
    dp = np.zeros(cap + 1)
    choice_tab = np.empty((k, cap + 1), dtype=np.int8)
    cands = np.empty((m, cap + 1))
    positions = np.arange(cap + 1)
    for i in range(k):
        cands.fill(-np.inf)
        for j in range(m):
            wj = int(w[i, j])
            if wj <= cap:
                cands[j, wj:] = dp[: cap + 1 - wj] + values[i, j]
        best_j = np.argmax(cands, axis=0)
        dp = cands[best_j, positions]
        choice_tab[i] = best_j
    b = cap
    choice = np.empty(k, dtype=np.int64)
    for i in range(k - 1, -1, -1):
        j = int(choice_tab[i, b])
        choice[i] = j
        b -= int(w[i, j])
    info["resolution"] = res
    info["cost_error_bound"] = k * res
    return choice, info


def _mckp_brute(values: np.ndarray, costs: np.ndarray, budget: float):
    k, m = values.shape
    count = m**k
    if count > 2_000_000:
        raise ClusterAllocError(f"brute force over {count} assignments is too large")
    idx = np.arange(count)
    # row 0 varies slowest: ties resolve to the lexicographically smallest choice
    choices = (idx[:, None] // (m ** np.arange(k - 1, -1, -1))[None, :]) % m
    rows = np.arange(k)
    total_cost = costs[rows, choices].sum(axis=1)
    total_value = values[rows, choices].sum(axis=1)
    feasible = total_cost <= budget
    if not feasible.any():
        raise InfeasibleBudgetError(budget, float(total_cost.min()))
    masked = np.where(feasible, total_value, -np.inf)
    best = int(np.argmax(masked))
    return choices[best].astype(np.int64), {"method": "brute_force"}


def _best_deviation(
    values: np.ndarray,
    costs: np.ndarray,
    budget: float,
    base: np.ndarray,
    improving_only: bool = False,
) -> np.ndarray | None:
    """Best feasible one- or two-row deviation of ``base`` by total value.

    ``base`` may itself be infeasible (deviations must land under budget).
    With ``improving_only`` the move must strictly increase total value;
    returns None when no qualifying move exists.
    """
    k, m = values.shape
    rows = np.arange(k)
    base_cost = _ordered_sum(costs, base)
    slack = budget - base_cost
    d_value = values - values[rows, base][:, None]
    d_cost = costs - costs[rows, base][:, None]
    floor = 1e-12 if improving_only else -np.inf

    best_gain = -np.inf
    best_move: tuple | None = None
    single_ok = d_cost <= slack
    if improving_only:
        single_ok &= d_value > floor
    if single_ok.any():
        gains = np.where(single_ok, d_value, -np.inf)
        i, j = divmod(int(np.argmax(gains)), m)
        best_gain, best_move = gains[i, j], ((i, j),)

    flat_v = d_value.ravel()
    flat_c = d_cost.ravel()
    pair_v = flat_v[:, None] + flat_v[None, :]
    pair_c = flat_c[:, None] + flat_c[None, :]
    row_of = np.arange(k * m) // m
    ok = (row_of[:, None] != row_of[None, :]) & (pair_c <= slack)
    if improving_only:
        ok &= pair_v > floor
    if ok.any():
        gains = np.where(ok, pair_v, -np.inf)
        a, b = divmod(int(np.argmax(gains)), k * m)
        if gains.ravel()[a * k * m + b] > best_gain:
            best_gain = gains.ravel()[a * k * m + b]
            best_move = ((a // m, a % m), (b // m, b % m))

    if best_move is None or (improving_only and best_gain <= 1e-12):
        return None
    out = base.copy()
    for i, j in best_move:
        out[i] = j
    if _ordered_sum(costs, out) > budget:
        return None
    return out


def _lagrangian_sweep(values: np.ndarray, costs: np.ndarray, budget: float, iters: int = 64):
    def allocate(eta: float):
        choice = _argmax_rows(values - eta * costs)
        return choice, _ordered_sum(values, choice), _ordered_sum(costs, choice)

    def dual_bound(eta: float) -> float:
        return float((values - eta * costs).max(axis=1).sum() + eta * budget)

    choice0, value0, cost0 = allocate(0.0)
    if cost0 <= budget:
        return choice0, {"method": "lagrangian_sweep", "eta": 0.0, "dual_bound": value0, "gap": 0.0}

    cheap = _min_cost_choice(values, costs)
    cheap_cost = _ordered_sum(costs, cheap)
    if cheap_cost > budget:
        raise InfeasibleBudgetError(budget, cheap_cost)

    best_choice, best_value = cheap, _ordered_sum(values, cheap)
    dual = dual_bound(0.0)

    hi = 1.0
    for _ in range(200):
        choice, value, cost = allocate(hi)
        dual = min(dual, dual_bound(hi))
        if cost <= budget:
            if value > best_value:
                best_choice, best_value = choice, value
            break
        hi *= 2.0
    lo = 0.0
    lo_choice = choice0
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        choice, value, cost = allocate(mid)
        dual = min(dual, dual_bound(mid))
        if cost <= budget:
            hi = mid
            if value > best_value:
                best_choice, best_value = choice, value
        else:
            lo = mid
            lo_choice = choice

    # At the critical multiplier the LP optimum deviates from the endpoint
    # allocations in very few rows, so take the best feasible one- or
    # two-row deviation of either endpoint as the starting point.
    hi_choice = best_choice
    for base in (lo_choice, hi_choice):
        candidate = _best_deviation(values, costs, budget, base)
        if candidate is not None:
            cand_value = _ordered_sum(values, candidate)
            if cand_value > best_value:
                best_choice, best_value = candidate, cand_value

    # local search: keep applying the best feasible improving one- or
    # two-row move (a budget-freeing downgrade can fund an upgrade)
    k, m = values.shape
    choice = best_choice.copy()
    for _ in range(4 * k * m):
        improved = _best_deviation(values, costs, budget, choice, improving_only=True)
        if improved is None:
            break
        choice = improved

    value = _ordered_sum(values, choice)
    return choice, {
        "method": "lagrangian_sweep",
        "eta": 0.5 * (lo + hi),
        "dual_bound": dual,
        "gap": max(dual - value, 0.0),
    }


def _make_assignment(stats: ClusterStats, choice: np.ndarray, score: np.ndarray, info: dict) -> Assignment:
    rows = np.arange(stats.k)
    w = stats.sizes.astype(np.float64)
    return Assignment(
        choice=choice,
        expected_revenue=float((w * stats.mu_r[rows, choice]).sum()),
        expected_cost=float((w * stats.mu_c[rows, choice]).sum()),
        objective=_ordered_sum(score, choice),
        info=info,
    )


def solve_stochastic(
    stats: ClusterStats,
    budget: float,
    lam: float = 0.1,
    kappa: float = 0.1,
    method: str = "exact_dp",
    buckets: int = DEFAULT_BUCKETS,
) -> Assignment:
    """Solve the cluster-level program with one arm per cluster.

    Raises :class:`InfeasibleBudgetError` (reporting the minimum feasible
    budget) when even the cheapest column per cluster does not fit.
    Feasibility of the returned assignment is re-checked post hoc.
    """
    if method not in _METHODS:
        raise ClusterAllocError(f"unknown method {method!r}; choose from {_METHODS}")
    score, cost = score_matrix(stats, lam, kappa)
    if method == "exact_dp":
        choice, info = _mckp_dp(score, cost, budget, buckets)
    elif method == "lagrangian_sweep":
        choice, info = _lagrangian_sweep(score, cost, budget)
    else:
        choice, info = _mckp_brute(score, cost, budget)
    assignment = _make_assignment(stats, choice, score, info)
    if assignment.expected_cost > budget * (1 + 1e-9) + 1e-9:
        raise ClusterAllocError(
            f"solver bug: assignment cost {assignment.expected_cost} exceeds budget {budget}"
        )
    return assignment


def solve_exact_ip(
    revenues: np.ndarray,
    costs: np.ndarray,
    budget: float,
    buckets: int = DEFAULT_BUCKETS,
) -> Assignment:
    """Exact individual-level multiple-choice knapsack via the same DP.

    ``revenues`` and ``costs`` are (n, m). This scales linearly in n and is
    the slow reference path; use the cluster program for anything large.
    The discretization resolution is reported in ``info``.
    """
    revenues = np.asarray(revenues, dtype=np.float64)
    costs = np.asarray(costs, dtype=np.float64)
    if revenues.shape != costs.shape or revenues.ndim != 2:
        raise ClusterAllocError("revenues and costs must be matching (n, m) matrices")
    choice, info = _mckp_dp(revenues, costs, budget, buckets)
    rows = np.arange(revenues.shape[0])
    return Assignment(
        choice=choice,
        expected_revenue=float(revenues[rows, choice].sum()),
        expected_cost=float(costs[rows, choice].sum()),
        objective=_ordered_sum(revenues, choice),
        info=info,
    )


# ---------------------------------------------------------------------------
# strategy library


@dataclass(frozen=True)
class StrategyLibrary:
    """Budget -> assignment mapping precomputed offline and served online."""

    budgets: np.ndarray
    entries: tuple[Assignment, ...]
    meta: dict = field(default_factory=dict)
    warnings: tuple[dict, ...] = ()

    def __post_init__(self):
        budgets = np.ascontiguousarray(self.budgets, dtype=np.float64)
        budgets.flags.writeable = False
        object.__setattr__(self, "budgets", budgets)
        if budgets.size != len(self.entries):
            raise ClusterAllocError("one entry per budget required")
        if budgets.size and np.any(np.diff(budgets) <= 0):
            raise ClusterAllocError("library budgets must be strictly increasing")


def build_strategy_library(stats: ClusterStats, config: SolverConfig) -> StrategyLibrary:
    """Solve every grid budget; infeasible points are skipped with a warning.

    The frontier is kept monotone in the optimized objective: if a later
    budget's solve comes back worse (possible only through discretization
    wobble), the previous assignment is carried forward, which stays
    feasible because budgets increase.
    """
    budgets, entries, warnings = [], [], []
    score, _ = score_matrix(stats, config.lam, config.kappa)
    for budget in config.budget_grid:
        try:
            assignment = solve_stochastic(
                stats, float(budget), config.lam, config.kappa, config.method
            )
        except InfeasibleBudgetError as exc:
            warnings.append({"budget": float(budget), "min_feasible": exc.min_feasible})
            continue
        if entries and assignment.objective < entries[-1].objective:
            prev = entries[-1]
            assignment = _make_assignment(
                stats, prev.choice, score, {**prev.info, "carried_forward": True}
            )
        budgets.append(float(budget))
        entries.append(assignment)
    return StrategyLibrary(
        budgets=np.asarray(budgets),
        entries=tuple(entries),
        meta={
            "k": stats.k,
            "m": stats.m,
            "lambda": config.lam,
            "kappa": config.kappa,
            "method": config.method,
        },
        warnings=tuple(warnings),
    )


def lookup_strategy(library: StrategyLibrary, budget: float) -> Assignment:
    """Entry with the largest grid budget <= ``budget`` (saturates at the top)."""
    if library.budgets.size == 0:
        raise ClusterAllocError("empty strategy library")
    pos = int(np.searchsorted(library.budgets, budget, side="right")) - 1
    if pos < 0:
        raise InfeasibleBudgetError(budget, float(library.budgets[0]))
    return library.entries[pos]


def library_to_dict(library: StrategyLibrary) -> dict:
    return {
        "format": "strategy-library-v1",
        "meta": library.meta,
        "warnings": list(library.warnings),
        "entries": [
            {
                "budget": float(b),
                "choice": e.choice.tolist(),
                "expected_revenue": e.expected_revenue,
                "expected_cost": e.expected_cost,
                "objective": e.objective,
            }
            for b, e in zip(library.budgets, library.entries)
        ],
    }


def library_from_dict(doc: dict) -> StrategyLibrary:
    if doc.get("format") != "strategy-library-v1":
        raise ClusterAllocError(f"unsupported library format {doc.get('format')!r}")
    entries = tuple(
        Assignment(
            choice=np.asarray(e["choice"], dtype=np.int64),
            expected_revenue=float(e["expected_revenue"]),
            expected_cost=float(e["expected_cost"]),
            objective=float(e["objective"]),
        )
        for e in doc["entries"]
    )
    return StrategyLibrary(
        budgets=np.asarray([e["budget"] for e in doc["entries"]]),
        entries=entries,
        meta=doc.get("meta", {}),
        warnings=tuple(doc.get("warnings", ())),
    )
