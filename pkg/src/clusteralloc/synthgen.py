"""Seeded synthetic RCT/OBS generators with exact ground-truth oracles.

Each individual belongs to one of ``g`` latent groups. Features are the
group's centroid (radius ``signal_radius`` on a sphere) plus unit isotropic
noise, so group structure is recoverable and its separability is a dial.
Outcomes are true (group, arm) cell means plus Gaussian noise; with
probability ``contamination`` the revenue noise is drawn at
``contamination_scale`` times its scale, mimicking the heavy-tailed outcome
confusion seen in real marketing logs. Costs stay nonnegative (values are
clipped at zero; calibrated configs make clipping vanishingly rare).

Because noise is zero-mean, policy values have closed forms in the cell
means, which is what the off-policy estimator is validated against.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .data import Dataset, DatasetKind, TreatmentSet
from .errors import ClusterAllocError


@dataclass(frozen=True)
class GenConfig:
    """Generator knobs plus the true (group, arm) response surface."""

    n: int
    d: int
    revenue_means: np.ndarray  # (g, m)
    cost_means: np.ndarray  # (g, m)
    revenue_stds: np.ndarray  # (g, m), scaled by sigma_noise
    cost_stds: np.ndarray  # (g, m), scaled by sigma_noise
    group_probs: np.ndarray  # (g,)
    treatment_values: np.ndarray  # (m,) strictly increasing
    signal_radius: float = 3.0
    sigma_noise: float = 1.0
    contamination: float = 0.0
    contamination_scale: float = 10.0
    obs_bias: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("revenue_means", "cost_means", "revenue_stds", "cost_stds",
                     "group_probs", "treatment_values"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        g, m = self.revenue_means.shape
        for name in ("cost_means", "revenue_stds", "cost_stds"):
            if getattr(self, name).shape != (g, m):
                raise ClusterAllocError(f"{name} must have shape ({g}, {m})")
        if self.group_probs.shape != (g,) or abs(self.group_probs.sum() - 1.0) > 1e-9:
            raise ClusterAllocError("group_probs must be a probability vector over groups")
        if self.treatment_values.shape != (m,) or not np.all(np.diff(self.treatment_values) > 0):
            raise ClusterAllocError("treatment_values must be strictly increasing, one per arm")
        if np.any(np.diff(self.revenue_means, axis=1) < 0):
            raise ClusterAllocError("true revenue means must be nondecreasing in the arm")
        if not 0 <= self.contamination < 1:
            raise ClusterAllocError("contamination rate must be in [0, 1)")
        if self.n < 1 or self.d < 1 or self.sigma_noise < 0 or self.obs_bias < 0:
            raise ClusterAllocError("invalid generator config")

    @property
    def g(self) -> int:
        return int(self.revenue_means.shape[0])

    @property
    def m(self) -> int:
        return int(self.revenue_means.shape[1])

    def treatment_set(self) -> TreatmentSet:
        return TreatmentSet.from_values(self.treatment_values)

    def with_(self, **kwargs) -> "GenConfig":
        from dataclasses import replace

        return replace(self, **kwargs)


@dataclass(frozen=True)
class GroundTruth:
    """Latent group of each sample plus the full true response surface."""

    groups: np.ndarray  # (n,)
    revenue_means: np.ndarray  # (g, m)
    cost_means: np.ndarray  # (g, m)


def _centroids(config: GenConfig, rng: np.random.Generator) -> np.ndarray:
    raw = rng.normal(size=(config.g, config.d))
    raw /= np.linalg.norm(raw, axis=1, keepdims=True)
    return config.signal_radius * raw


def _outcomes(config: GenConfig, rng: np.random.Generator, groups: np.ndarray, arms: np.ndarray):
    n = groups.size
    eps_r = rng.normal(size=n)
    eps_c = rng.normal(size=n)
    contaminated = rng.random(n) < config.contamination
    scale_r = np.where(contaminated, config.contamination_scale, 1.0)
    revenue = (
        config.revenue_means[groups, arms]
        + config.sigma_noise * config.revenue_stds[groups, arms] * scale_r * eps_r
    )
    cost = (
        config.cost_means[groups, arms]
        + config.sigma_noise * config.cost_stds[groups, arms] * eps_c
    )
    return revenue, np.maximum(cost, 0.0)


def generate_rct(config: GenConfig) -> tuple[Dataset, GroundTruth]:
    """Uniformly randomized treatments; propensity 1/m by design."""
    rng = np.random.default_rng(np.random.Philox(key=config.seed))
    centroids = _centroids(config, rng)
    groups = rng.choice(config.g, size=config.n, p=config.group_probs)
    features = centroids[groups] + rng.normal(size=(config.n, config.d))
    arms = rng.integers(config.m, size=config.n)
    revenue, cost = _outcomes(config, rng, groups, arms)
    dataset = Dataset(
        features=features,
        treatment=arms,
        cost=cost,
        revenue=revenue,
        propensity=np.full(config.n, 1.0 / config.m),
        kind=DatasetKind.RCT,
        treatment_set=config.treatment_set(),
    )
    truth = GroundTruth(
        groups=groups.astype(np.int64),
        revenue_means=config.revenue_means.copy(),
        cost_means=config.cost_means.copy(),
    )
    return dataset, truth


def obs_propensity_table(config: GenConfig) -> np.ndarray:
    """(g, m) logging probabilities of the biased observational policy.

    Higher-value groups over-receive higher arms: logits are
    ``obs_bias * standardized(group value) * centered(arm level)``, so zero
    bias reduces to the uniform RCT arm distribution.
    """
    value = config.revenue_means.mean(axis=1)
    std = value.std()
    v = (value - value.mean()) / std if std > 0 else np.zeros_like(value)
    t_norm = config.treatment_set().normalized()
    t_centered = 2.0 * t_norm - 1.0
    logits = config.obs_bias * v[:, None] * t_centered[None, :]
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def generate_obs(config: GenConfig) -> tuple[Dataset, GroundTruth]:
    """Observational logging: arms drawn from the biased per-group policy.

    True propensities (the table entries of the sampled arm) are recorded
    per sample.
    """
    rng = np.random.default_rng(np.random.Philox(key=config.seed))
    centroids = _centroids(config, rng)
    groups = rng.choice(config.g, size=config.n, p=config.group_probs)
    features = centroids[groups] + rng.normal(size=(config.n, config.d))
    table = obs_propensity_table(config)
    u = rng.random(config.n)
    cdf = np.cumsum(table, axis=1)
    arms = (u[:, None] > cdf[groups]).sum(axis=1)
    revenue, cost = _outcomes(config, rng, groups, arms)
    dataset = Dataset(
        features=features,
        treatment=arms,
        cost=cost,
        revenue=revenue,
        propensity=table[groups, arms],
        kind=DatasetKind.OBS,
        treatment_set=config.treatment_set(),
    )
    truth = GroundTruth(
        groups=groups.astype(np.int64),
        revenue_means=config.revenue_means.copy(),
        cost_means=config.cost_means.copy(),
    )
    return dataset, truth


# ---------------------------------------------------------------------------
# exact policy-value oracles


def true_group_policy_value(config: GenConfig, choice_per_group) -> tuple[float, float]:
    """Exact (expected revenue, expected cost) of an arm choice per latent group."""
    choice = np.asarray(choice_per_group, dtype=np.int64)
    idx = np.arange(config.g)
    rev = float((config.group_probs * config.revenue_means[idx, choice]).sum())
    cost = float((config.group_probs * config.cost_means[idx, choice]).sum())
    return rev, cost


def true_constant_arm_value(config: GenConfig, arm: int) -> tuple[float, float]:
    return true_group_policy_value(config, np.full(config.g, arm))


def oracle_policy_value(config: GenConfig) -> tuple[float, float]:
    """Value of the unconstrained oracle (per-group argmax of true revenue)."""
    return true_group_policy_value(config, np.argmax(config.revenue_means, axis=1))


def true_policy_value(
    config: GenConfig,
    policy: Callable[[np.ndarray], np.ndarray],
    n: int = 200_000,
    seed: int = 1_234_567,
) -> tuple[float, float, float, float]:
    """Monte-Carlo policy value over fresh draws, noise-free in outcomes.

    ``policy`` maps a feature batch to arm indices. Returns
    (revenue, cost, revenue_se, cost_se); the standard errors only reflect
    the Monte-Carlo sampling of (group, features), since outcome noise is
    integrated out exactly through the cell means.
    """
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, seed]))
    centroids = _centroids(config, np.random.default_rng(np.random.Philox(key=config.seed)))
    groups = rng.choice(config.g, size=n, p=config.group_probs)
    features = centroids[groups] + rng.normal(size=(n, config.d))
    arms = np.asarray(policy(features), dtype=np.int64)
    rev = config.revenue_means[groups, arms]
    cost = config.cost_means[groups, arms]
    return (
        float(rev.mean()),
        float(cost.mean()),
        float(rev.std(ddof=1) / np.sqrt(n)),
        float(cost.std(ddof=1) / np.sqrt(n)),
    )


# ---------------------------------------------------------------------------
# config factories


def default_config(
    n: int,
    d: int = 10,
    m: int = 4,
    g: int = 4,
    seed: int = 0,
    sigma_noise: float = 1.0,
    contamination: float = 0.0,
    obs_bias: float = 0.0,
    signal_radius: float = 3.0,
) -> GenConfig:
    """A small heterogeneous-response scenario for experiments and tests.

    Groups differ in base revenue, uplift slope, and cost slope, so the
    budget-optimal arm varies by group and budget.
    """
    t_norm = np.linspace(0.0, 1.0, m)
    base = np.linspace(0.8, 2.2, g)
    uplift = 0.4 + 1.6 * (np.arange(g) * 2 % g) / max(g - 1, 1)  # non-monotone across groups
    cost_slope = 0.3 + 1.2 * (np.arange(g)[::-1] % g) / max(g - 1, 1)
    curve = np.tanh(1.5 * t_norm) / np.tanh(1.5)
    revenue_means = base[:, None] + uplift[:, None] * curve[None, :]
    cost_means = cost_slope[:, None] * t_norm[None, :]
    return GenConfig(
        n=n,
        d=d,
        revenue_means=revenue_means,
        cost_means=cost_means,
        revenue_stds=np.ones((g, m)),
        cost_stds=0.25 * cost_means,
        group_probs=np.full(g, 1.0 / g),
        treatment_values=np.linspace(0.05, 0.10, m),
        signal_radius=signal_radius,
        sigma_noise=sigma_noise,
        contamination=contamination,
        obs_bias=obs_bias,
        seed=seed,
    )


# Aggregate (mean, std) targets for the cost and revenue columns of the two
# calibrated scenarios; see table_calibrated_config.
_CALIBRATION_TARGETS = {
    "w1": {"cost": (0.321, 3.639), "revenue": (0.851, 2.231)},
    "w3": {"cost": (1.397, 7.613), "revenue": (0.928, 2.484)},
}


def table_calibrated_config(
    n: int,
    week: str = "w1",
    d: int = 10,
    m: int = 4,
    seed: int = 0,
    contamination: float = 0.0,
    signal_radius: float = 3.0,
) -> GenConfig:
    """A scenario whose aggregate cost/revenue moments match real logs.

    The cost column's std/mean ratio (> 11) cannot come from symmetric
    within-cell noise while costs stay nonnegative, so the spread is
    structural: a tiny high-spend group carries the heavy tail, and cost
    noise is proportional to the cell mean. Revenue carries most of its
    variance in within-cell noise. Constants below were solved against the
    closed-form aggregate moments and verified empirically.
    """
    if week not in _CALIBRATION_TARGETS:
        raise ClusterAllocError(f"unknown calibration target {week!r}")
    t_norm = np.linspace(0.0, 1.0, m)
    group_probs = np.array([0.40, 0.305, 0.20, 0.09, 0.005])
    g = group_probs.size

    if week == "w1":
        cost_slope = np.array([0.0784807, 0.1471513, 0.2943026, 1.177211, 80.18342])
        rev_base = np.array([0.1525, 0.50, 0.90, 1.60, 4.00])
        rev_uplift = np.array([0.30, 0.80, 0.50, 1.20, 3.00])
        sigma_r = 2.1221
    else:  # w3: summer analog, costlier and slightly richer
        cost_slope = np.array([0.700763, 1.293716, 2.587433, 8.624776, 165.075716])
        rev_base = np.array([0.1448, 0.55, 1.00, 1.75, 4.40])
        rev_uplift = np.array([0.33, 0.88, 0.55, 1.32, 3.30])
        sigma_r = 2.3636

    revenue_means = rev_base[:, None] + rev_uplift[:, None] * t_norm[None, :]
    cost_means = cost_slope[:, None] * t_norm[None, :]
    return GenConfig(
        n=n,
        d=d,
        revenue_means=revenue_means,
        cost_means=cost_means,
        revenue_stds=np.full((g, m), sigma_r),
        cost_stds=0.25 * cost_means,
        group_probs=group_probs,
        treatment_values=np.linspace(0.05, 0.10, m),
        signal_radius=signal_radius,
        sigma_noise=1.0,
        contamination=contamination,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# ground-truth serialization


def ground_truth_to_dict(truth: GroundTruth) -> dict:
    return {
        "format": "ground-truth-v1",
        "groups": truth.groups.tolist(),
        "revenue_means": truth.revenue_means.tolist(),
        "cost_means": truth.cost_means.tolist(),
    }


def ground_truth_from_dict(doc: dict) -> GroundTruth:
    if doc.get("format") != "ground-truth-v1":
        raise ClusterAllocError(f"unsupported ground truth format {doc.get('format')!r}")
    return GroundTruth(
        groups=np.asarray(doc["groups"], dtype=np.int64),
        revenue_means=np.asarray(doc["revenue_means"], dtype=np.float64),
        cost_means=np.asarray(doc["cost_means"], dtype=np.float64),
    )
