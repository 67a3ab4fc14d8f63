"""Minimal dense networks with hand-rolled reverse-mode gradients.

This is the substrate every model in the package trains on: plain
mini-batch gradient descent, seeded Glorot-uniform initialization, L2
weight decay, and finite-difference gradient checking. No adaptive
optimizers, no autodiff graph; composite models chain the per-network
forward/backward passes by hand.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ClusterAllocError, TrainingDivergedError

# ---------------------------------------------------------------------------
# activations


def _softplus(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


ACTIVATIONS: dict[str, tuple[Callable, Callable]] = {
    "identity": (lambda x: x, lambda x: np.ones_like(x)),
    "relu": (lambda x: np.maximum(x, 0.0), lambda x: (x > 0).astype(np.float64)),
    "tanh": (np.tanh, lambda x: 1.0 - np.tanh(x) ** 2),
    "softplus": (_softplus, _sigmoid),
}


# ---------------------------------------------------------------------------
# network


@dataclass
class Layer:
    w: np.ndarray  # (fan_in, fan_out)
    b: np.ndarray  # (fan_out,)
    activation: str


@dataclass
class Mlp:
    layers: list[Layer]

    @property
    def input_dim(self) -> int:
        return int(self.layers[0].w.shape[0])

    @property
    def output_dim(self) -> int:
        return int(self.layers[-1].w.shape[1])


def mlp_init(dims: Sequence[int], activations: Sequence[str] | str, rng: np.random.Generator) -> Mlp:
    """Build an MLP with Glorot-uniform weights (+-sqrt(6/(fan_in+fan_out))) and zero biases.

    ``dims`` chains layer widths; ``activations`` gives one name per layer or
    a single name applied to every hidden layer with an identity output.
    """
    n_layers = len(dims) - 1
    if isinstance(activations, str):
        activations = [activations] * (n_layers - 1) + ["identity"]
    if len(activations) != n_layers:
        raise ClusterAllocError(f"need {n_layers} activations, got {len(activations)}")
    layers = []
    for fan_in, fan_out, act in zip(dims[:-1], dims[1:], activations):
        if act not in ACTIVATIONS:
            raise ClusterAllocError(f"unknown activation {act!r}")
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        layers.append(Layer(w=w, b=np.zeros(fan_out), activation=act))
    return Mlp(layers=layers)


def mlp_parameters(net: Mlp) -> list[np.ndarray]:
    """Flat list of parameter arrays (weights and biases, layer order)."""
    params = []
    for layer in net.layers:
        params.append(layer.w)
        params.append(layer.b)
    return params


def mlp_copy(net: Mlp) -> Mlp:
    return Mlp(layers=[Layer(w=l.w.copy(), b=l.b.copy(), activation=l.activation) for l in net.layers])


def mlp_forward(net: Mlp, x: np.ndarray):
    """Forward pass keeping the caches needed for the backward pass.

    Returns ``(output, cache)`` where ``cache`` is the list of
    (layer input, pre-activation) pairs.
    """
    h = np.asarray(x, dtype=np.float64)
    if h.ndim != 2:
        raise ClusterAllocError("mlp_forward expects a (n, input_dim) batch")
    if h.shape[1] != net.input_dim:
        raise ClusterAllocError(f"input dim {h.shape[1]} != network input dim {net.input_dim}")
    cache = []
    for layer in net.layers:
        pre = h @ layer.w + layer.b
        cache.append((h, pre))
        h = ACTIVATIONS[layer.activation][0](pre)
    return h, cache


def mlp_apply(net: Mlp, x: np.ndarray) -> np.ndarray:
    """Deterministic forward pass; accepts a single vector or a batch."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    out, _ = mlp_forward(net, x[None, :] if single else x)
    return out[0] if single else out


@dataclass
class GradientSet:
    """Per-parameter gradients mirroring an Mlp's layer shapes."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def flat(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out


def mlp_backward(net: Mlp, cache, dout: np.ndarray):
    """Backpropagate ``dout`` (gradient w.r.t. the network output).

    Returns ``(GradientSet, dinput)``. ``dout`` must already carry any batch
    averaging, i.e. it is d(loss)/d(output) of whatever scalar loss the
    caller is differentiating.
    """
    d = np.asarray(dout, dtype=np.float64)
    grads_w = [None] * len(net.layers)
    grads_b = [None] * len(net.layers)
    for idx in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[idx]
        h_in, pre = cache[idx]
        dpre = d * ACTIVATIONS[layer.activation][1](pre)
        grads_w[idx] = h_in.T @ dpre
        grads_b[idx] = dpre.sum(axis=0)
        d = dpre @ layer.w.T
    return GradientSet(weights=grads_w, biases=grads_b), d


# ---------------------------------------------------------------------------
# losses
#
# A loss object evaluates a scalar over a batch of network outputs and
# exposes the gradient of that scalar w.r.t. the outputs. per_sample() is
# the un-averaged view used for divergence reporting.


class SquaredLoss:
    """Mean squared error against fixed targets."""

    def __init__(self, targets: np.ndarray):
        self.targets = np.asarray(targets, dtype=np.float64)

    def per_sample(self, out: np.ndarray) -> np.ndarray:
        t = self.targets.reshape(out.shape)
        return ((out - t) ** 2).reshape(out.shape[0], -1).sum(axis=1)

    def value(self, out: np.ndarray) -> float:
        return float(self.per_sample(out).mean())

    def grad(self, out: np.ndarray) -> np.ndarray:
        t = self.targets.reshape(out.shape)
        return 2.0 * (out - t) / out.shape[0]


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class CrossEntropyLoss:
    """Softmax cross-entropy against integer class labels."""

    def __init__(self, labels: np.ndarray):
        self.labels = np.asarray(labels, dtype=np.int64)

    def per_sample(self, out: np.ndarray) -> np.ndarray:
        p = softmax(out)
        idx = np.arange(out.shape[0])
        return -np.log(np.maximum(p[idx, self.labels], 1e-300))

    def value(self, out: np.ndarray) -> float:
        return float(self.per_sample(out).mean())

    def grad(self, out: np.ndarray) -> np.ndarray:
        p = softmax(out)
        idx = np.arange(out.shape[0])
        p[idx, self.labels] -= 1.0
        return p / out.shape[0]


def mlp_grad(net: Mlp, loss, batch: np.ndarray) -> GradientSet:
    """Exact reverse-mode gradients of the mean batch loss.

    Raises :class:`TrainingDivergedError` carrying the first offending batch
    index if any per-sample loss is non-finite.
    """
    out, cache = mlp_forward(net, np.asarray(batch, dtype=np.float64))
    per = loss.per_sample(out)
    if not np.all(np.isfinite(per)):
        bad = int(np.flatnonzero(~np.isfinite(per))[0])
        raise ClusterAllocError(f"non-finite loss at batch index {bad} (value={per[bad]})")
    grads, _ = mlp_backward(net, cache, loss.grad(out))
    return grads


# ---------------------------------------------------------------------------
# numeric differentiation oracles


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.asarray(analytic).ravel()
    n = np.asarray(numeric).ravel()
    return float(np.max(np.abs(a - n) / (np.abs(a) + np.abs(n) + 1e-12))) if a.size else 0.0


def numeric_gradient(f: Callable[[], float], params: Sequence[np.ndarray], step: float) -> list[np.ndarray]:
    """Central finite differences of ``f()`` w.r.t. arrays perturbed in place."""
    grads = []
    for p in params:
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = f()
            flat[i] = orig - step
            lo = f()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * step)
        grads.append(g)
    return grads


def numeric_jacobian(f: Callable[[np.ndarray], np.ndarray], x: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian of a vector-valued function at ``x``."""
    x = np.asarray(x, dtype=np.float64)
    y0 = np.asarray(f(x), dtype=np.float64)
    jac = np.zeros((y0.size, x.size))
    for i in range(x.size):
        xp = x.copy()
        xp[i] += step
        xm = x.copy()
        xm[i] -= step
        jac[:, i] = (np.asarray(f(xp)) - np.asarray(f(xm))).ravel() / (2.0 * step)
    return jac


def grad_check(net: Mlp, loss, batch: np.ndarray, step: float = 1e-5) -> float:
    """Max relative error between analytic and central finite-difference gradients."""
    batch = np.asarray(batch, dtype=np.float64)
    analytic = mlp_grad(net, loss, batch).flat()

    def f() -> float:
        out, _ = mlp_forward(net, batch)
        return loss.value(out)

    numeric = numeric_gradient(f, mlp_parameters(net), step)
    return max(
        max_relative_error(a, n) for a, n in zip(analytic, numeric)
    )


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    learning_rate: float
    epochs: int
    batch_size: int
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0 or self.epochs < 1 or self.batch_size < 1 or self.weight_decay < 0:
            raise ClusterAllocError(f"invalid training config: {self}")


def batch_indices(n: int, batch_size: int, rng: np.random.Generator):
    """One epoch of shuffled batch index arrays (full-batch fallback if needed)."""
    order = rng.permutation(n)
    bs = min(batch_size, n)
    return [order[i : i + bs] for i in range(0, n, bs)]


def sgd_step(net: Mlp, grads: GradientSet, learning_rate: float, weight_decay: float = 0.0) -> None:
    """In-place gradient-descent update; decay is an L2 penalty on weights only."""
    for layer, dw, db in zip(net.layers, grads.weights, grads.biases):
        layer.w -= learning_rate * (dw + weight_decay * layer.w)
        layer.b -= learning_rate * db


def train(
    net: Mlp,
    inputs: np.ndarray,
    targets: np.ndarray,
    loss_factory: Callable[[np.ndarray], object],
    config: TrainConfig,
) -> tuple[Mlp, list[float]]:
    """Mini-batch gradient descent on ``net`` (in place).

    ``loss_factory(targets_batch)`` builds the loss object for each batch.
    Returns the trained network and the per-epoch mean data loss trace.
    Deterministic given ``config.seed``: batches are reshuffled once per
    epoch from a dedicated generator.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    n = inputs.shape[0]
    rng = np.random.default_rng(config.seed)
    trace = []
    for epoch in range(config.epochs):
        total = 0.0
        for idx in batch_indices(n, config.batch_size, rng):
            xb = inputs[idx]
            loss = loss_factory(targets[idx])
            out, cache = mlp_forward(net, xb)
            value = loss.value(out)
            if not np.isfinite(value):
                raise TrainingDivergedError(epoch=epoch, loss=value)
            total += value * len(idx)
            grads, _ = mlp_backward(net, cache, loss.grad(out))
            sgd_step(net, grads, config.learning_rate, config.weight_decay)
        trace.append(total / n)
    return net, trace


# ---------------------------------------------------------------------------
# feature standardization


@dataclass(frozen=True)
class Standardizer:
    """Per-feature z-score transform fitted on training data."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> "Standardizer":
        x = np.asarray(x, dtype=np.float64)
        std = x.std(axis=0)
        return cls(mean=x.mean(axis=0), std=np.where(std < 1e-8, 1.0, std))

    @classmethod
    def identity(cls, dim: int) -> "Standardizer":
        return cls(mean=np.zeros(dim), std=np.ones(dim))

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std


# ---------------------------------------------------------------------------
# checkpoint container
#
# Deterministic binary layout: a sorted-key JSON header describing every
# array (name, shape, byte offset), a newline, then the raw little-endian
# float64 buffers in header order. No timestamps, so identical models
# produce identical bytes.

CHECKPOINT_FORMAT = "clusteralloc-ckpt-v1"


def save_checkpoint(
    path,
    kind: str,
    nets: dict[str, Mlp],
    standardizer: Standardizer | None = None,
    meta: dict | None = None,
) -> None:
    """Write named networks (+ optional standardizer and JSON metadata) to one file."""
    arrays: list[tuple[str, np.ndarray]] = []
    net_specs = {}
    for name in sorted(nets):
        net = nets[name]
        net_specs[name] = {
            "activations": [l.activation for l in net.layers],
            "n_layers": len(net.layers),
        }
        for i, layer in enumerate(net.layers):
            arrays.append((f"{name}/w{i}", layer.w))
            arrays.append((f"{name}/b{i}", layer.b))
    if standardizer is not None:
        arrays.append(("standardizer/mean", standardizer.mean))
        arrays.append(("standardizer/std", standardizer.std))

    offset = 0
    index = []
    for name, arr in arrays:
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.nbytes
    header = {
        "format": CHECKPOINT_FORMAT,
        "kind": kind,
        "nets": net_specs,
        "meta": meta or {},
        "arrays": index,
    }
    buf = io.BytesIO()
    buf.write(json.dumps(header, sort_keys=True).encode("utf-8"))
    buf.write(b"\n")
    for _, arr in arrays:
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path):
    """Read a checkpoint; returns ``(kind, nets, standardizer, meta)``."""
    with open(path, "rb") as fh:
        blob = fh.read()
    nl = blob.index(b"\n")
    header = json.loads(blob[:nl].decode("utf-8"))
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ClusterAllocError(f"{path}: unsupported checkpoint format {header.get('format')!r}")
    body = blob[nl + 1 :]
    raw = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(body, dtype="<f8", count=count, offset=start).reshape(shape)
        raw[entry["name"]] = arr.astype(np.float64)
    nets = {}
    for name, spec in header["nets"].items():
        layers = [
            Layer(w=raw[f"{name}/w{i}"].copy(), b=raw[f"{name}/b{i}"].copy(), activation=act)
            for i, act in enumerate(spec["activations"])
        ]
        nets[name] = Mlp(layers=layers)
    standardizer = None
    if "standardizer/mean" in raw:
        standardizer = Standardizer(mean=raw["standardizer/mean"].copy(), std=raw["standardizer/std"].copy())
    return header["kind"], nets, standardizer, header["meta"]
