"""Multi-task representation network and the distilled cluster classifier.

The network has a shared hidden-representation trunk feeding two heads: a
revenue head (either a concat head for randomized data or a monotone
hypernetwork head for observational data) and an arm-classification
propensity head. Training minimizes

    mean[ (r_hat(z_i, t_i) - y_i)^2 + alpha * cross_entropy(arm logits, t_i) ]

The propensity term is implemented as an M-way softmax classifier rather
than a scalar regression on the arm index, which is the standard treatment
for categorical arms.

The monotone head generates nonnegative weights from z and squashes the
(normalized, repeated) treatment level through tanh:

    r_hat = sum_k |outer_k(z)| * tanh(|inner_k(z)| * t_norm)

Since the repeated treatment vector has identical entries, the generated
weight matrix only acts through its row sums, so the hypernetworks emit
those directly. Nonnegativity of both factors makes r_hat nondecreasing in
the treatment level for every z, by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cluster import ClusterModel, assign
from .data import Dataset, TreatmentSet
from .errors import ClusterAllocError
from .nn import (
    CrossEntropyLoss,
    Mlp,
    Standardizer,
    TrainConfig,
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
from .nn import batch_indices as _batch_indices


@dataclass
class ConcatHead:
    """Revenue head for randomized data: MLP on [z, onehot(arm)]."""

    net: Mlp
    m: int

    def forward(self, z, t_idx, t_norm):
        onehot = np.zeros((z.shape[0], self.m))
        onehot[np.arange(z.shape[0]), t_idx] = 1.0
        out, cache = mlp_forward(self.net, np.concatenate([z, onehot], axis=1))
        return out[:, 0], cache

    def backward(self, cache, dr):
        grads, dinp = mlp_backward(self.net, cache, dr[:, None])
        return [(self.net, grads)], dinp[:, : dinp.shape[1] - self.m]

    def nets(self):
        return {"head": self.net}


@dataclass
class MonotonicHead:
    """Hypernetwork revenue head, nondecreasing in the treatment level."""

    w_inner: Mlp
    w_outer: Mlp
    repeat_dim: int

    def forward(self, z, t_idx, t_norm):
        a_raw, cache_a = mlp_forward(self.w_inner, z)
        b_raw, cache_b = mlp_forward(self.w_outer, z)
        th = np.tanh(np.abs(a_raw) * t_norm[:, None])
        r = (np.abs(b_raw) * th).sum(axis=1)
        return r, (cache_a, cache_b, a_raw, b_raw, th, t_norm)

    def backward(self, cache, dr):
        cache_a, cache_b, a_raw, b_raw, th, t_norm = cache
        db_raw = dr[:, None] * th * np.sign(b_raw)
        da_raw = (
            dr[:, None] * np.abs(b_raw) * (1.0 - th**2) * t_norm[:, None] * np.sign(a_raw)
        )
        g_outer, dz_b = mlp_backward(self.w_outer, cache_b, db_raw)
        g_inner, dz_a = mlp_backward(self.w_inner, cache_a, da_raw)
        return [(self.w_inner, g_inner), (self.w_outer, g_outer)], dz_a + dz_b

    def nets(self):
        return {"head_inner": self.w_inner, "head_outer": self.w_outer}


@dataclass
class RepNet:
    """Trained representation trunk plus revenue and propensity heads."""

    standardizer: Standardizer
    rep: Mlp
    revenue_head: ConcatHead | MonotonicHead
    propensity_head: Mlp
    alpha: float
    treatment_set: TreatmentSet

    @property
    def d_z(self) -> int:
        return self.rep.output_dim


def embed(net: RepNet, x: np.ndarray) -> np.ndarray:
    """Hidden representation z of raw features (standardized internally)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    d = net.standardizer.mean.size
    if (x.shape[0] if single else x.shape[1]) != d:
        raise ClusterAllocError(f"feature dim {x.shape[-1]} != expected {d}")
    xs = net.standardizer.transform(x[None, :] if single else x)
    z, _ = mlp_forward(net.rep, xs)
    return z[0] if single else z


def predict_revenue(net: RepNet, z: np.ndarray, t) -> float | np.ndarray:
    """Predicted revenue of arm ``t`` at representation ``z``."""
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    zb = z[None, :] if single else z
    t_idx = np.broadcast_to(np.asarray(t, dtype=np.int64), (zb.shape[0],))
    m = net.treatment_set.count
    if t_idx.min() < 0 or t_idx.max() >= m:
        raise ClusterAllocError(f"treatment index outside [0, {m})")
    t_norm = net.treatment_set.normalized()[t_idx]
    r, _ = net.revenue_head.forward(zb, t_idx, t_norm)
    return float(r[0]) if single else r


def predict_revenue_matrix(net: RepNet, z: np.ndarray) -> np.ndarray:
    """All-arm predictions: (n, m) matrix of predicted revenues."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    return np.stack(
        [predict_revenue(net, z, j) for j in range(net.treatment_set.count)], axis=1
    )


def predict_propensity(net: RepNet, z: np.ndarray) -> np.ndarray:
    """Arm-assignment probabilities (softmax over the propensity head)."""
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    logits, _ = mlp_forward(net.propensity_head, z[None, :] if single else z)
    p = softmax(logits)
    return p[0] if single else p


def _repnet_batch_loss(net: RepNet, xs: np.ndarray, t_idx: np.ndarray, y: np.ndarray):
    """Loss and per-network gradients on one standardized batch."""
    z, cache_rep = mlp_forward(net.rep, xs)
    t_norm = net.treatment_set.normalized()[t_idx]
    r, cache_head = net.revenue_head.forward(z, t_idx, t_norm)
    logits, cache_prop = mlp_forward(net.propensity_head, z)

    ce = CrossEntropyLoss(t_idx)
    loss = float(((r - y) ** 2).mean() + net.alpha * ce.value(logits))

    nb = y.shape[0]
    dr = 2.0 * (r - y) / nb
    pairs, dz_head = net.revenue_head.backward(cache_head, dr)
    dlogits = net.alpha * ce.grad(logits)
    g_prop, dz_prop = mlp_backward(net.propensity_head, cache_prop, dlogits)
    g_rep, _ = mlp_backward(net.rep, cache_rep, dz_head + dz_prop)
    return loss, [(net.rep, g_rep), *pairs, (net.propensity_head, g_prop)]


def repnet_loss_value(net: RepNet, xs: np.ndarray, t_idx: np.ndarray, y: np.ndarray) -> float:
    """The training objective on a standardized batch (for gradient checking)."""
    z, _ = mlp_forward(net.rep, xs)
    t_norm = net.treatment_set.normalized()[t_idx]
    r, _ = net.revenue_head.forward(z, t_idx, t_norm)
    logits, _ = mlp_forward(net.propensity_head, z)
    return float(((r - y) ** 2).mean() + net.alpha * CrossEntropyLoss(t_idx).value(logits))


def repnet_parameters(net: RepNet) -> list[np.ndarray]:
    params = mlp_parameters(net.rep)
    for sub in net.revenue_head.nets().values():
        params.extend(mlp_parameters(sub))
    params.extend(mlp_parameters(net.propensity_head))
    return params


def build_repnet(
    treatment_set: TreatmentSet,
    d: int,
    head: str = "concat",
    d_z: int = 32,
    alpha: float = 1.0,
    hidden: tuple[int, ...] = (64,),
    head_hidden: tuple[int, ...] = (32,),
    hyper_hidden: tuple[int, ...] = (16,),
    repeat_dim: int = 8,
    rep_activation: str = "tanh",
    standardizer: Standardizer | None = None,
    seed: int = 0,
) -> RepNet:
    """Freshly initialized network (seeded); training is separate."""
    if alpha < 0:
        raise ClusterAllocError("alpha must be >= 0")
    m = treatment_set.count
    rng = np.random.default_rng(seed)
    rep = mlp_init(
        (d, *hidden, d_z), [rep_activation] * (len(hidden) + 1), rng
    )
    if head == "concat":
        revenue_head = ConcatHead(
            net=mlp_init((d_z + m, *head_hidden, 1), rep_activation, rng), m=m
        )
    elif head == "monotonic":
        revenue_head = MonotonicHead(
            w_inner=mlp_init((d_z, *hyper_hidden, repeat_dim), rep_activation, rng),
            w_outer=mlp_init((d_z, *hyper_hidden, repeat_dim), rep_activation, rng),
            repeat_dim=repeat_dim,
        )
    else:
        raise ClusterAllocError(f"unknown head kind {head!r}")
    propensity_head = mlp_init((d_z, m), "identity", rng)
    return RepNet(
        standardizer=standardizer or Standardizer.identity(d),
        rep=rep,
        revenue_head=revenue_head,
        propensity_head=propensity_head,
        alpha=alpha,
        treatment_set=treatment_set,
    )


def train_repnet(
    dataset: Dataset,
    head: str = "concat",
    d_z: int = 32,
    alpha: float = 1.0,
    config: TrainConfig | None = None,
    **build_kwargs,
) -> tuple[RepNet, list[float]]:
    """Fit the multi-task network on logged data.

    Deterministic given ``config.seed`` (also used for initialization).
    Returns the network and the per-epoch mean loss trace.
    """
    if config is None:
        config = TrainConfig(learning_rate=0.05, epochs=30, batch_size=512)
    net = build_repnet(
        dataset.treatment_set,
        dataset.feature_dim,
        head=head,
        d_z=d_z,
        alpha=alpha,
        standardizer=Standardizer.fit(dataset.features),
        seed=config.seed,
        **build_kwargs,
    )
    xs_all = net.standardizer.transform(dataset.features)
    rng = np.random.default_rng(config.seed)
    trace = []
    for epoch in range(config.epochs):
        total = 0.0
        for idx in _batch_indices(dataset.n, config.batch_size, rng):
            loss, pairs = _repnet_batch_loss(
                net, xs_all[idx], dataset.treatment[idx], dataset.revenue[idx]
            )
            if not np.isfinite(loss):
                from .errors import TrainingDivergedError

                raise TrainingDivergedError(epoch=epoch, loss=loss)
            total += loss * idx.size
            for sub, grads in pairs:
                sgd_step(sub, grads, config.learning_rate, config.weight_decay)
        trace.append(total / dataset.n)
    return net, trace


# ---------------------------------------------------------------------------
# distillation


@dataclass
class DistilledClassifier:
    """Single network replacing trunk + k-means for serving: x -> cluster."""

    standardizer: Standardizer
    net: Mlp

    @property
    def k(self) -> int:
        return self.net.output_dim


def distill(
    repnet: RepNet,
    cluster_model: ClusterModel,
    dataset: Dataset,
    config: TrainConfig | None = None,
    hidden: tuple[int, ...] = (64,),
) -> tuple[DistilledClassifier, list[float]]:
    """Train a k-way classifier on the cluster labels of the dataset.

    Labels are ``assign(cluster_model, embed(repnet, x))``; the classifier
    minimizes cross-entropy against them.
    """
    if dataset.n == 0:
        raise ClusterAllocError("cannot distill from an empty dataset")
    if config is None:
        config = TrainConfig(learning_rate=0.1, epochs=40, batch_size=512)
    labels = assign(cluster_model, embed(repnet, dataset.features))
    net = mlp_init(
        (dataset.feature_dim, *hidden, cluster_model.k),
        "tanh",
        np.random.default_rng(config.seed),
    )
    xs = repnet.standardizer.transform(dataset.features)
    net, trace = train(net, xs, labels, CrossEntropyLoss, config)
    return DistilledClassifier(standardizer=repnet.standardizer, net=net), trace


def classify(classifier: DistilledClassifier, x: np.ndarray) -> int | np.ndarray:
    """Predicted cluster index (argmax of logits; ties go to the lowest index)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    logits, _ = mlp_forward(classifier.net, classifier.standardizer.transform(np.atleast_2d(x)))
    idx = np.argmax(logits, axis=1)
    return int(idx[0]) if single else idx


def class_probabilities(classifier: DistilledClassifier, x: np.ndarray) -> np.ndarray:
    logits, _ = mlp_forward(classifier.net, classifier.standardizer.transform(np.atleast_2d(x)))
    return softmax(logits)


# ---------------------------------------------------------------------------
# checkpoints


def save_repnet(path, net: RepNet) -> None:
    nets = {"rep": net.rep, "prop": net.propensity_head}
    nets.update(net.revenue_head.nets())
    head_kind = "concat" if isinstance(net.revenue_head, ConcatHead) else "monotonic"
    meta = {
        "head": head_kind,
        "alpha": net.alpha,
        "treatment_values": net.treatment_set.values.tolist(),
        "treatment_labels": list(net.treatment_set.labels),
    }
    if head_kind == "monotonic":
        meta["repeat_dim"] = net.revenue_head.repeat_dim
    save_checkpoint(path, "repnet", nets, net.standardizer, meta)


def load_repnet(path) -> RepNet:
    kind, nets, standardizer, meta = load_checkpoint(path)
    if kind != "repnet":
        raise ClusterAllocError(f"{path}: expected a repnet checkpoint, got {kind!r}")
    ts = TreatmentSet.from_values(meta["treatment_values"], meta["treatment_labels"])
    if meta["head"] == "concat":
        head = ConcatHead(net=nets["head"], m=ts.count)
    else:
        head = MonotonicHead(
            w_inner=nets["head_inner"],
            w_outer=nets["head_outer"],
            repeat_dim=int(meta["repeat_dim"]),
        )
    return RepNet(
        standardizer=standardizer,
        rep=nets["rep"],
        revenue_head=head,
        propensity_head=nets["prop"],
        alpha=float(meta["alpha"]),
        treatment_set=ts,
    )


def save_classifier(path, classifier: DistilledClassifier) -> None:
    save_checkpoint(path, "classifier", {"net": classifier.net}, classifier.standardizer, {})


def load_classifier(path) -> DistilledClassifier:
    kind, nets, standardizer, _ = load_checkpoint(path)
    if kind != "classifier":
        raise ClusterAllocError(f"{path}: expected a classifier checkpoint, got {kind!r}")
    return DistilledClassifier(standardizer=standardizer, net=nets["net"])
