"""Off-policy evaluation of allocation policies on randomized logs.

The primary estimator is the matched-cohort form of the expected outcome
metric: for each arm j, the mean outcome over samples whose logged arm and
policy arm are both j, weighted by the fraction of the population the
policy sends to arm j,

    V_hat = sum_j (n_j_pi / N) * mean(outcome | t = j, pi(x) = j).

Under randomized logging the logged arm is independent of features, so each
cohort mean is an unbiased estimate of the arm's outcome on the
policy-selected subpopulation. Standard errors combine the per-cohort
sampling variance with the multinomial variance of the weights (delta
method, cells treated as independent). A plain inverse-propensity-weighted
estimator is available behind ``method="ipw"`` for cross-checking; the two
agree in expectation on uniformly randomized data.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .allocator import StrategyLibrary, lookup_strategy
from .cluster import ClusterModel, assign
from .data import Dataset, DatasetKind
from .errors import ClusterAllocError
from .repnet import DistilledClassifier, RepNet, classify, embed


@dataclass(frozen=True)
class Policy:
    """A deterministic features -> arm mapping with an optional budget tag."""

    name: str
    fn: Callable[[np.ndarray], np.ndarray]
    budget: float | None = None

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(self.fn(np.atleast_2d(x)), dtype=np.int64)


def constant_policy(arm: int, name: str | None = None) -> Policy:
    return Policy(
        name=name or f"constant-{arm}",
        fn=lambda x: np.full(x.shape[0], arm, dtype=np.int64),
    )


def hrc_policy(
    classifier: DistilledClassifier,
    library: StrategyLibrary,
    budget: float,
    name: str = "hrc",
) -> Policy:
    """Serving-path policy: distilled classifier -> strategy-library lookup."""
    choice = lookup_strategy(library, budget).choice

    def fn(x: np.ndarray) -> np.ndarray:
        return choice[classify(classifier, x)]

    return Policy(name=name, fn=fn, budget=budget)


def hrc_cluster_policy(
    repnet: RepNet,
    cluster_model: ClusterModel,
    library: StrategyLibrary,
    budget: float,
    name: str = "hrc-exact",
) -> Policy:
    """Offline-path policy: exact embed + nearest-center assignment."""
    choice = lookup_strategy(library, budget).choice

    def fn(x: np.ndarray) -> np.ndarray:
        return choice[assign(cluster_model, embed(repnet, x))]

    return Policy(name=name, fn=fn, budget=budget)


@dataclass(frozen=True)
class EomEstimate:
    """Point estimates and standard errors for one policy on one dataset."""

    revenue_mean: float
    cost_mean: float
    revenue_se: float
    cost_se: float
    match_count: int
    degenerate: bool = False
    degenerate_arms: tuple[int, ...] = ()


def _matched_estimate(values: np.ndarray, logged: np.ndarray, chosen: np.ndarray, m: int):
    n = values.size
    weights = np.bincount(chosen, minlength=m) / n
    mean = 0.0
    var_cells = 0.0
    sq_term = 0.0
    degenerate_arms = []
    for j in range(m):
        if weights[j] == 0:
            continue
        cohort = values[(logged == j) & (chosen == j)]
        if cohort.size == 0:
            degenerate_arms.append(j)
            continue
        cell_mean = cohort.mean()
        mean += weights[j] * cell_mean
        sq_term += weights[j] * cell_mean**2
        if cohort.size > 1:
            var_cells += weights[j] ** 2 * cohort.var(ddof=1) / cohort.size
    var_weights = max(sq_term - mean**2, 0.0) / n
    se = float(np.sqrt(var_cells + var_weights))
    return float(mean), se, degenerate_arms


def eom(dataset: Dataset, policy: Policy, method: str = "matched") -> EomEstimate:
    """Expected-outcome estimate of ``policy`` on a randomized dataset.

    Any arm the policy uses that has no matched samples is reported in
    ``degenerate_arms`` (its contribution is dropped and the estimate
    flagged). Raises on non-RCT data: the estimator needs randomized arms.
    """
    if dataset.kind is not DatasetKind.RCT:
        raise ClusterAllocError("the expected-outcome metric requires RCT data")
    if method not in ("matched", "ipw"):
        raise ClusterAllocError(f"unknown estimator {method!r}")
    chosen = policy(dataset.features)
    if chosen.shape != (dataset.n,):
        raise ClusterAllocError("policy must return one arm per sample")
    m = dataset.treatment_set.count
    if chosen.size and (chosen.min() < 0 or chosen.max() >= m):
        raise ClusterAllocError(f"policy produced an arm outside [0, {m})")
    logged = dataset.treatment

    if method == "ipw":
        matched = (chosen == logged).astype(np.float64)
        w = matched / dataset.propensity
        vr = w * dataset.revenue
        vc = w * dataset.cost
        n = dataset.n
        return EomEstimate(
            revenue_mean=float(vr.mean()),
            cost_mean=float(vc.mean()),
            revenue_se=float(vr.std(ddof=1) / np.sqrt(n)),
            cost_se=float(vc.std(ddof=1) / np.sqrt(n)),
            match_count=int(matched.sum()),
        )

    rev_mean, rev_se, degenerate_arms = _matched_estimate(dataset.revenue, logged, chosen, m)
    cost_mean, cost_se, _ = _matched_estimate(dataset.cost, logged, chosen, m)
    match_count = int(((chosen == logged)).sum())
    return EomEstimate(
        revenue_mean=rev_mean,
        cost_mean=cost_mean,
        revenue_se=rev_se,
        cost_se=cost_se,
        match_count=match_count,
        degenerate=bool(degenerate_arms),
        degenerate_arms=tuple(degenerate_arms),
    )


def eom_curve(
    dataset: Dataset,
    policy_family: Callable[[float], Policy],
    budgets,
) -> list[tuple[float, EomEstimate]]:
    """One estimate per budget, in grid order."""
    return [(float(b), eom(dataset, policy_family(float(b)))) for b in budgets]


def compare(
    families: dict[str, Callable[[float], Policy]],
    dataset: Dataset,
    budgets,
) -> dict:
    """Evaluate every policy family over the budget grid.

    Returns ``{"rows": [...], "winners": {budget: family}}`` where each row
    carries the EOM revenue/cost estimates with standard errors and the
    winner per budget is by revenue point estimate.
    """
    if not families:
        raise ClusterAllocError("at least one policy family required")
    rows = []
    for name, family in families.items():
        for budget, est in eom_curve(dataset, family, budgets):
            rows.append(
                {
                    "family": name,
                    "budget": budget,
                    "revenue": est.revenue_mean,
                    "revenue_se": est.revenue_se,
                    "cost": est.cost_mean,
                    "cost_se": est.cost_se,
                    "match_count": est.match_count,
                    "degenerate": est.degenerate,
                }
            )
    winners = {}
    for budget in (float(b) for b in budgets):
        at_budget = [r for r in rows if r["budget"] == budget]
        best = max(at_budget, key=lambda r: r["revenue"])
        winners[budget] = best["family"]
    return {"rows": rows, "winners": winners}


_CSV_COLUMNS = ("family", "budget", "revenue", "revenue_se", "cost", "cost_se")


def report_to_csv(report: dict, path) -> None:
    lines = [",".join(_CSV_COLUMNS)]
    for row in report["rows"]:
        lines.append(
            ",".join(
                [row["family"]]
                + [repr(float(row[c])) for c in _CSV_COLUMNS[1:]]
            )
        )
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def report_to_json(report: dict, path) -> None:
    doc = {
        "format": "eom-report-v1",
        "rows": report["rows"],
        "winners": {repr(float(k)): v for k, v in report.get("winners", {}).items()},
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2)
        fh.write("\n")
