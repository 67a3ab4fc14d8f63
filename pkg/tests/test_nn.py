import numpy as np
import pytest

import clusteralloc as ca
from clusteralloc import nn


def identity_layer_net(dim):
    return nn.Mlp(layers=[nn.Layer(w=np.eye(dim), b=np.zeros(dim), activation="identity")])


def test_identity_layer():
    net = identity_layer_net(2)
    assert np.array_equal(nn.mlp_apply(net, np.array([1.0, 2.0])), [1.0, 2.0])


def test_relu_clamp():
    net = nn.Mlp(layers=[nn.Layer(w=np.eye(2), b=np.zeros(2), activation="relu")])
    assert np.array_equal(nn.mlp_apply(net, np.array([-1.0, 2.0])), [0.0, 2.0])


def test_forward_matches_loop_oracle():
    # independent oracle: per-neuron loops, no matrix ops
    rng = np.random.default_rng(7)
    net = nn.mlp_init((3, 4, 2), ["tanh", "identity"], rng)
    x = rng.normal(size=3)

    h = list(x)
    for layer in net.layers:
        out = []
        for j in range(layer.w.shape[1]):
            s = layer.b[j]
            for i in range(layer.w.shape[0]):
                s += h[i] * layer.w[i, j]
            out.append(np.tanh(s) if layer.activation == "tanh" else s)
        h = out
    expected = np.array(h)
    assert np.allclose(nn.mlp_apply(net, x), expected, rtol=1e-12, atol=0)


def test_dimension_mismatch():
    net = identity_layer_net(2)
    with pytest.raises(ca.ClusterAllocError, match="dim"):
        nn.mlp_apply(net, np.zeros(3))


def test_zero_net_zero_gradients():
    net = nn.Mlp(layers=[nn.Layer(w=np.zeros((2, 1)), b=np.zeros(1), activation="identity")])
    grads = nn.mlp_grad(net, nn.SquaredLoss(np.zeros(3)), np.ones((3, 2)))
    assert all(np.all(g == 0) for g in grads.flat())


def test_linear_net_closed_form_gradient():
    rng = np.random.default_rng(1)
    w = rng.normal(size=(3, 2))
    net = nn.Mlp(layers=[nn.Layer(w=w.copy(), b=np.zeros(2), activation="identity")])
    x = rng.normal(size=(1, 3))
    y = rng.normal(size=(1, 2))
    grads = nn.mlp_grad(net, nn.SquaredLoss(y), x)
    closed = x.T @ (2.0 * (x @ w - y))
    assert np.allclose(grads.weights[0], closed, rtol=1e-12)


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(5)
    net = nn.mlp_init((4, 8, 6, 3), "tanh", rng)
    x = rng.normal(size=(5, 4))
    loss = nn.SquaredLoss(rng.normal(size=(5, 3)))
    assert nn.grad_check(net, loss, x, step=1e-5) < 1e-4


def test_grad_check_thresholds():
    rng = np.random.default_rng(2)
    lin = nn.mlp_init((3, 2), "identity", rng)
    x = rng.normal(size=(4, 3))
    assert nn.grad_check(lin, nn.SquaredLoss(rng.normal(size=(4, 2))), x) < 1e-7

    deep = nn.mlp_init((3, 10, 10, 10, 1), "tanh", rng)
    assert nn.grad_check(deep, nn.SquaredLoss(rng.normal(size=(4, 1))), x) < 1e-4


def test_grad_check_negative_control():
    # a loss whose reported gradient is off by 10% must be flagged
    class CorruptedLoss(nn.SquaredLoss):
        def grad(self, out):
            return 1.1 * super().grad(out)

    rng = np.random.default_rng(3)
    net = nn.mlp_init((3, 4, 2), "tanh", rng)
    x = rng.normal(size=(4, 3))
    assert nn.grad_check(net, CorruptedLoss(rng.normal(size=(4, 2))), x) > 1e-2


def test_nonfinite_loss_reports_batch_index():
    net = identity_layer_net(1)
    targets = np.array([0.0, np.inf, 0.0])
    with pytest.raises(ca.ClusterAllocError, match="index 1"):
        nn.mlp_grad(net, nn.SquaredLoss(targets), np.ones((3, 1)))


def test_train_linear_regression():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(200, 1))
    y = 2.0 * x[:, 0]
    net = nn.mlp_init((1, 1), "identity", rng)
    cfg = nn.TrainConfig(learning_rate=0.1, epochs=200, batch_size=32, seed=0)
    net, trace = nn.train(net, x, y, nn.SquaredLoss, cfg)
    assert abs(net.layers[0].w[0, 0] - 2.0) < 0.05
    assert trace[-1] < trace[0]


def test_zero_learning_rate_is_noop():
    rng = np.random.default_rng(0)
    net = nn.mlp_init((2, 3, 1), "tanh", rng)
    before = [p.copy() for p in nn.mlp_parameters(net)]
    cfg = nn.TrainConfig(learning_rate=0.0, epochs=3, batch_size=4, seed=0)
    nn.train(net, rng.normal(size=(10, 2)), rng.normal(size=10), nn.SquaredLoss, cfg)
    assert all(np.array_equal(a, b) for a, b in zip(before, nn.mlp_parameters(net)))


def test_identical_seeds_identical_traces():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(50, 3))
    y = rng.normal(size=50)
    cfg = nn.TrainConfig(learning_rate=0.05, epochs=10, batch_size=8, seed=9)
    traces, params = [], []
    for _ in range(2):
        net = nn.mlp_init((3, 5, 1), "tanh", np.random.default_rng(1))
        net, trace = nn.train(net, x, y, nn.SquaredLoss, cfg)
        traces.append(trace)
        params.append(nn.mlp_parameters(net))
    assert traces[0] == traces[1]
    assert all(np.array_equal(a, b) for a, b in zip(*params))


def test_weight_decay_shrinks_norm():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(100, 4))
    y = rng.normal(size=100)  # pure noise
    norms = []
    for wd in (0.0, 0.1):
        net = nn.mlp_init((4, 8, 1), "tanh", np.random.default_rng(2))
        cfg = nn.TrainConfig(learning_rate=0.05, epochs=50, batch_size=32, weight_decay=wd, seed=0)
        nn.train(net, x, y, nn.SquaredLoss, cfg)
        norms.append(np.sqrt(sum((l.w**2).sum() for l in net.layers)))
    assert norms[1] < norms[0]


@pytest.mark.filterwarnings("ignore:overflow")
def test_divergence_aborts_with_epoch():
    rng = np.random.default_rng(0)
    net = nn.mlp_init((2, 2, 1), "identity", rng)
    cfg = nn.TrainConfig(learning_rate=1e6, epochs=50, batch_size=64, seed=0)
    with pytest.raises(ca.TrainingDivergedError):
        nn.train(net, rng.normal(size=(64, 2)), rng.normal(size=64), nn.SquaredLoss, cfg)


def test_full_batch_fallback():
    rng = np.random.default_rng(0)
    net = nn.mlp_init((2, 1), "identity", rng)
    cfg = nn.TrainConfig(learning_rate=0.01, epochs=2, batch_size=10_000, seed=0)
    _, trace = nn.train(net, rng.normal(size=(20, 2)), rng.normal(size=20), nn.SquaredLoss, cfg)
    assert len(trace) == 2


def test_cross_entropy_loss_grad():
    rng = np.random.default_rng(4)
    logits = rng.normal(size=(6, 3))
    labels = rng.integers(3, size=6)
    loss = nn.CrossEntropyLoss(labels)
    numeric = nn.numeric_gradient(lambda: loss.value(logits), [logits], 1e-6)[0]
    assert nn.max_relative_error(loss.grad(logits), numeric) < 1e-6


def test_standardizer():
    rng = np.random.default_rng(0)
    x = rng.normal(loc=3.0, scale=2.0, size=(500, 3))
    s = nn.Standardizer.fit(x)
    xs = s.transform(x)
    assert np.allclose(xs.mean(axis=0), 0, atol=1e-12)
    assert np.allclose(xs.std(axis=0), 1, atol=1e-12)
    const = nn.Standardizer.fit(np.ones((10, 2)))
    assert np.all(const.std == 1.0)  # constant features stay finite


def test_checkpoint_roundtrip_and_determinism(tmp_path):
    rng = np.random.default_rng(8)
    nets = {
        "a": nn.mlp_init((3, 4, 2), "tanh", rng),
        "b": nn.mlp_init((2, 5), "identity", rng),
    }
    std = nn.Standardizer(mean=np.array([1.0, 2.0, 3.0]), std=np.array([1.0, 0.5, 2.0]))
    p1, p2 = tmp_path / "m1.ckpt", tmp_path / "m2.ckpt"
    nn.save_checkpoint(p1, "test-kind", nets, std, {"note": 1})
    nn.save_checkpoint(p2, "test-kind", nets, std, {"note": 1})
    assert p1.read_bytes() == p2.read_bytes()

    kind, loaded, std2, meta = nn.load_checkpoint(p1)
    assert kind == "test-kind" and meta == {"note": 1}
    for name in nets:
        for l1, l2 in zip(nets[name].layers, loaded[name].layers):
            assert np.array_equal(l1.w, l2.w)
            assert np.array_equal(l1.b, l2.b)
            assert l1.activation == l2.activation
    assert np.array_equal(std.mean, std2.mean)


def test_gradient_correctness_many_seeds():
    # every activation, several shapes, squared + cross-entropy losses
    for seed in range(8):
        rng = np.random.default_rng(seed)
        net = nn.mlp_init((3, 6, 4), ["softplus", "identity"], rng)
        x = rng.normal(size=(4, 3))
        assert nn.grad_check(net, nn.SquaredLoss(rng.normal(size=(4, 4))), x) < 1e-4
        assert nn.grad_check(net, nn.CrossEntropyLoss(rng.integers(4, size=4)), x) < 1e-4
