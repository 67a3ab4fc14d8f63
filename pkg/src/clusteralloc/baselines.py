"""Comparison allocators: S-learner + greedy search, two-model + Lagrangian
duality, and decision-focused learning.

All three share the budget semantics of the evaluation layer: a policy maps
features to one arm per individual, and the budget caps the model-predicted
total cost. The heuristic counts cost incrementally over control (so zero
budget means everyone stays at arm 0); the two-model and DFL allocators cap
the predicted total cost directly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .errors import ClusterAllocError, InfeasibleBudgetError, TrainingDivergedError
from .nn import (
    Mlp,
    SquaredLoss,
    Standardizer,
    TrainConfig,
    batch_indices,
    load_checkpoint,
    mlp_backward,
    mlp_forward,
    mlp_init,
    mlp_parameters,
    save_checkpoint,
    sgd_step,
    softmax,
    train,
)
from .data import Assignment


# ---------------------------------------------------------------------------
# S-learner + heuristic search


@dataclass
class SLearner:
    """One net over [features, onehot(arm)] predicting revenue."""

    standardizer: Standardizer
    net: Mlp
    m: int


def _with_onehot(xs: np.ndarray, t: np.ndarray, m: int) -> np.ndarray:
    onehot = np.zeros((xs.shape[0], m))
    onehot[np.arange(xs.shape[0]), t] = 1.0
    return np.concatenate([xs, onehot], axis=1)


def train_slearner(
    dataset: Dataset,
    config: TrainConfig | None = None,
    hidden: tuple[int, ...] = (64,),
) -> tuple[SLearner, list[float]]:
    """Squared-error fit of revenue on the logged (features, arm) pairs."""
    if config is None:
        config = TrainConfig(learning_rate=0.05, epochs=30, batch_size=512)
    m = dataset.treatment_set.count
    standardizer = Standardizer.fit(dataset.features)
    inputs = _with_onehot(standardizer.transform(dataset.features), dataset.treatment, m)
    net = mlp_init(
        (dataset.feature_dim + m, *hidden, 1), "tanh", np.random.default_rng(config.seed)
    )
    net, trace = train(net, inputs, dataset.revenue, SquaredLoss, config)
    return SLearner(standardizer=standardizer, net=net, m=m), trace


def slearner_predict(model: SLearner, x: np.ndarray) -> np.ndarray:
    """(n, m) matrix of predicted revenues for every arm."""
    xs = model.standardizer.transform(np.atleast_2d(np.asarray(x, dtype=np.float64)))
    cols = []
    for j in range(model.m):
        t = np.full(xs.shape[0], j, dtype=np.int64)
        out, _ = mlp_forward(model.net, _with_onehot(xs, t, model.m))
        cols.append(out[:, 0])
    return np.stack(cols, axis=1)


def greedy_uplift_allocate(
    rhat: np.ndarray,
    budget: float,
    unit_costs: np.ndarray,
) -> np.ndarray:
    """Greedy core of the heuristic: upgrade by uplift-per-cost rank.

    Each individual's candidate arm is their argmax-uplift arm; individuals
    are ranked by uplift per incremental unit cost (over control) and
    upgraded in rank order while the budget lasts. Nonpositive uplift stays
    at control; free upgrades (no incremental cost) rank first.
    """
    unit_costs = np.asarray(unit_costs, dtype=np.float64)
    if unit_costs.shape != (rhat.shape[1],):
        raise ClusterAllocError("one unit cost per arm required")
    uplift = rhat - rhat[:, [0]]
    best_arm = np.argmax(uplift, axis=1)
    best_uplift = uplift[np.arange(rhat.shape[0]), best_arm]
    inc_cost = unit_costs[best_arm] - unit_costs[0]
    ratio = np.where(inc_cost > 0, best_uplift / np.where(inc_cost > 0, inc_cost, 1.0), np.inf)

    choice = np.zeros(rhat.shape[0], dtype=np.int64)
    remaining = budget
    for i in np.argsort(-ratio, kind="stable"):
        if best_uplift[i] <= 0 or best_arm[i] == 0:
            continue
        if inc_cost[i] <= remaining:
            choice[i] = best_arm[i]
            remaining -= inc_cost[i]
    return choice


def heuristic_allocate(
    model: SLearner,
    x: np.ndarray,
    budget: float,
    unit_costs: np.ndarray,
) -> Assignment:
    """S-learner predictions fed through :func:`greedy_uplift_allocate`.

    Budget is counted incrementally over control, so a zero budget keeps
    everyone at arm 0 and an unbounded budget gives everyone their
    argmax-uplift arm.
    """
    unit_costs = np.asarray(unit_costs, dtype=np.float64)
    rhat = slearner_predict(model, x)
    choice = greedy_uplift_allocate(rhat, budget, unit_costs)
    rows = np.arange(rhat.shape[0])
    spent = float((unit_costs[choice] - unit_costs[0]).sum())
    return Assignment(
        choice=choice,
        expected_revenue=float(rhat[rows, choice].sum()),
        expected_cost=spent,
        objective=float(rhat[rows, choice].sum()),
        info={"method": "heuristic", "total_unit_cost": float(unit_costs[choice].sum())},
    )


def heuristic_allocate_proportions(
    model: SLearner,
    x: np.ndarray,
    proportions: np.ndarray,
) -> np.ndarray:
    """Fixed-proportion variant: sort by best uplift, split into arm groups.

    ``proportions[j]`` is the fraction of individuals given arm j; the
    highest-uplift individuals receive the highest arms.
    """
    proportions = np.asarray(proportions, dtype=np.float64)
    if abs(proportions.sum() - 1.0) > 1e-9 or np.any(proportions < 0):
        raise ClusterAllocError("proportions must be nonnegative and sum to 1")
    rhat = slearner_predict(model, x)
    n, m = rhat.shape
    best_uplift = (rhat - rhat[:, [0]]).max(axis=1)
    order = np.argsort(-best_uplift, kind="stable")
    bounds = np.round(np.cumsum(proportions[::-1]) * n).astype(int)
    choice = np.zeros(n, dtype=np.int64)
    start = 0
    for rank, stop in enumerate(bounds):
        arm = m - 1 - rank
        choice[order[start:stop]] = arm
        start = stop
    return choice


# ---------------------------------------------------------------------------
# two-model (masked) regression + Lagrangian duality


@dataclass
class TwoModel:
    """Separate revenue and cost nets, each predicting all m arms."""

    standardizer: Standardizer
    revenue_net: Mlp
    cost_net: Mlp

    @property
    def m(self) -> int:
        return self.revenue_net.output_dim


@dataclass(frozen=True)
class DflConfig:
    """Decision-focused training knobs (multipliers, temperature, loss weights)."""

    lambda_list: tuple[float, ...]
    temperature: float = 0.5
    theta_d: float = 0.3
    theta_r: float = 1.0
    theta_c: float = 1.0

    def __post_init__(self):
        if not self.lambda_list:
            raise ClusterAllocError("lambda_list must be nonempty")
        if self.temperature <= 0:
            raise ClusterAllocError("temperature must be > 0 during training")
        if min(self.theta_d, self.theta_r, self.theta_c) < 0:
            raise ClusterAllocError("loss weights must be >= 0")

    @property
    def midpoint_lambda(self) -> float:
        return self.lambda_list[(len(self.lambda_list) - 1) // 2]


def masked_pair_loss(
    rhat: np.ndarray,
    chat: np.ndarray,
    t: np.ndarray,
    r: np.ndarray,
    c: np.ndarray,
):
    """Masked squared errors: only the logged arm's outputs carry gradient.

    Returns (loss, d_rhat, d_chat) with gradients of the batch-mean loss.
    """
    nb = t.shape[0]
    rows = np.arange(nb)
    err_r = rhat[rows, t] - r
    err_c = chat[rows, t] - c
    loss = float((err_r**2).mean() + (err_c**2).mean())
    d_rhat = np.zeros_like(rhat)
    d_chat = np.zeros_like(chat)
    d_rhat[rows, t] = 2.0 * err_r / nb
    d_chat[rows, t] = 2.0 * err_c / nb
    return loss, d_rhat, d_chat


def dfl_loss(
    rhat: np.ndarray,
    chat: np.ndarray,
    t: np.ndarray,
    r: np.ndarray,
    c: np.ndarray,
    cfg: DflConfig,
):
    """Full decision-focused loss with gradients.

    The decision term rewards putting softmax mass (over predicted
    per-multiplier utilities) on arms whose *logged* utility was good;
    gradients flow only through the softmax. The regression terms are the
    masked squared errors. Returns (loss, d_rhat, d_chat).
    """
    nb, m = rhat.shape
    rows = np.arange(nb)
    _, d_rhat, d_chat = masked_pair_loss(rhat, chat, t, r, c)
    d_rhat *= cfg.theta_r
    d_chat *= cfg.theta_c

    decision = 0.0
    for lam in cfg.lambda_list:
        u_hat = rhat - lam * chat
        q = softmax(u_hat / cfg.temperature)
        u_logged = r - lam * c
        q_t = q[rows, t]
        decision += m * float((q_t * u_logged).mean())
        # d/d u_hat[i, k] of m * mean_i(q[i, t_i] * u_i)
        dq = (m / nb) * (u_logged * q_t)[:, None] * (-q) / cfg.temperature
        dq[rows, t] += (m / nb) * u_logged * q_t / cfg.temperature
        d_rhat += -cfg.theta_d * dq
        d_chat += -cfg.theta_d * dq * (-lam)
    err_r = rhat[rows, t] - r
    err_c = chat[rows, t] - c
    loss = (
        -cfg.theta_d * decision
        + cfg.theta_r * float((err_r**2).mean())
        + cfg.theta_c * float((err_c**2).mean())
    )
    return loss, d_rhat, d_chat


def _train_pair(
    dataset: Dataset,
    config: TrainConfig,
    hidden: tuple[int, ...],
    dfl_cfg: DflConfig | None,
) -> tuple[TwoModel, list[float]]:
    m = dataset.treatment_set.count
    standardizer = Standardizer.fit(dataset.features)
    xs_all = standardizer.transform(dataset.features)
    rng_init = np.random.default_rng(config.seed)
    revenue_net = mlp_init((dataset.feature_dim, *hidden, m), "tanh", rng_init)
    cost_net = mlp_init((dataset.feature_dim, *hidden, m), "tanh", rng_init)
    rng = np.random.default_rng(config.seed)
    trace = []
    for epoch in range(config.epochs):
        total = 0.0
        for idx in batch_indices(dataset.n, config.batch_size, rng):
            rhat, cache_r = mlp_forward(revenue_net, xs_all[idx])
            chat, cache_c = mlp_forward(cost_net, xs_all[idx])
            if dfl_cfg is None:
                loss, d_rhat, d_chat = masked_pair_loss(
                    rhat, chat, dataset.treatment[idx], dataset.revenue[idx], dataset.cost[idx]
                )
            else:
                loss, d_rhat, d_chat = dfl_loss(
                    rhat, chat, dataset.treatment[idx], dataset.revenue[idx],
                    dataset.cost[idx], dfl_cfg,
                )
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch=epoch, loss=loss)
            total += loss * idx.size
            g_r, _ = mlp_backward(revenue_net, cache_r, d_rhat)
            g_c, _ = mlp_backward(cost_net, cache_c, d_chat)
            sgd_step(revenue_net, g_r, config.learning_rate, config.weight_decay)
            sgd_step(cost_net, g_c, config.learning_rate, config.weight_decay)
        trace.append(total / dataset.n)
    return TwoModel(standardizer=standardizer, revenue_net=revenue_net, cost_net=cost_net), trace


def train_two_model(
    dataset: Dataset,
    config: TrainConfig | None = None,
    hidden: tuple[int, ...] = (64,),
) -> tuple[TwoModel, list[float]]:
    """Fit revenue and cost nets with arm-masked squared errors."""
    if config is None:
        config = TrainConfig(learning_rate=0.05, epochs=30, batch_size=512)
    return _train_pair(dataset, config, hidden, None)


def train_dfl(
    dataset: Dataset,
    dfl_config: DflConfig,
    config: TrainConfig | None = None,
    hidden: tuple[int, ...] = (64,),
) -> tuple[TwoModel, list[float]]:
    """Fit the two nets under the decision-focused loss.

    With ``theta_d = 0`` this coincides exactly with :func:`train_two_model`
    (the arm-count scalings cancel), which the tests pin down.
    """
    if config is None:
        config = TrainConfig(learning_rate=0.05, epochs=30, batch_size=512)
    return _train_pair(dataset, config, hidden, dfl_config)


def two_model_predict(model: TwoModel, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    xs = model.standardizer.transform(np.atleast_2d(np.asarray(x, dtype=np.float64)))
    rhat, _ = mlp_forward(model.revenue_net, xs)
    chat, _ = mlp_forward(model.cost_net, xs)
    return rhat, chat


def lagrangian_allocate(
    model: TwoModel,
    x: np.ndarray,
    budget: float,
    iters: int = 64,
    tol: float = 0.01,
) -> Assignment:
    """Bisection on the cost multiplier until predicted cost meets the budget.

    Each individual gets argmax(rhat - lambda * chat) (ties to the lowest
    arm); lambda is bisected until the predicted total cost is within
    ``tol`` of the budget or the bisection step limit is reached, always
    returning a feasible (cost <= budget) allocation.
    """
    rhat, chat = two_model_predict(model, x)
    rows = np.arange(rhat.shape[0])

    def alloc(lmb: float):
        choice = np.argmax(rhat - lmb * chat, axis=1)
        return choice, float(chat[rows, choice].sum())

    choice0, cost0 = alloc(0.0)
    mincost = float(chat.min(axis=1).sum())
    if budget < mincost:
        raise InfeasibleBudgetError(budget, mincost)
    if cost0 <= budget:
        best, lam = choice0, 0.0
    else:
        hi = 1.0
        for _ in range(200):
            choice, cost = alloc(hi)
            if cost <= budget:
                break
            hi *= 2.0
        lo = 0.0
        best = choice
        for _ in range(iters):
            mid = 0.5 * (lo + hi)
            choice, cost = alloc(mid)
            if cost <= budget:
                hi, best = mid, choice
                if cost >= budget * (1.0 - tol):
                    break
            else:
                lo = mid
        lam = hi
    return Assignment(
        choice=best,
        expected_revenue=float(rhat[rows, best].sum()),
        expected_cost=float(chat[rows, best].sum()),
        objective=float(rhat[rows, best].sum()),
        info={"method": "lagrangian", "lambda": lam},
    )


# ---------------------------------------------------------------------------
# checkpoints


def save_slearner(path, model: SLearner) -> None:
    save_checkpoint(path, "slearner", {"net": model.net}, model.standardizer, {"m": model.m})


def load_slearner(path) -> SLearner:
    kind, nets, standardizer, meta = load_checkpoint(path)
    if kind != "slearner":
        raise ClusterAllocError(f"{path}: expected an slearner checkpoint, got {kind!r}")
    return SLearner(standardizer=standardizer, net=nets["net"], m=int(meta["m"]))


def save_two_model(path, model: TwoModel, kind: str = "two_model") -> None:
    save_checkpoint(
        path, kind, {"revenue": model.revenue_net, "cost": model.cost_net}, model.standardizer, {}
    )


def load_two_model(path, kind: str = "two_model") -> TwoModel:
    actual, nets, standardizer, _ = load_checkpoint(path)
    if actual != kind:
        raise ClusterAllocError(f"{path}: expected a {kind} checkpoint, got {actual!r}")
    return TwoModel(standardizer=standardizer, revenue_net=nets["revenue"], cost_net=nets["cost"])
