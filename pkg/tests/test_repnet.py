import numpy as np
import pytest

import clusteralloc as ca
from clusteralloc import nn, repnet as rn

TS4 = ca.TreatmentSet.from_values([0.05, 0.0667, 0.0833, 0.10])


def test_embed_deterministic_and_shaped(trained_repnet):
    x = np.linspace(-1, 1, trained_repnet.standardizer.mean.size)
    z1, z2 = ca.embed(trained_repnet, x), ca.embed(trained_repnet, x)
    assert np.array_equal(z1, z2)
    assert z1.shape == (trained_repnet.d_z,)


def test_embed_dimension_check(trained_repnet):
    with pytest.raises(ca.ClusterAllocError):
        ca.embed(trained_repnet, np.zeros(trained_repnet.standardizer.mean.size + 1))


def test_embed_perturbation_matches_jacobian(trained_repnet):
    # numerical-Jacobian oracle: ||dz||^2 vs ||J delta||^2 within 10%
    rng = np.random.default_rng(0)
    x = rng.normal(size=trained_repnet.standardizer.mean.size) * 2.0
    jac = nn.numeric_jacobian(lambda v: ca.embed(trained_repnet, v), x, step=1e-6)
    delta = rng.normal(size=x.size)
    delta *= 1e-4 * np.linalg.norm(x) / np.linalg.norm(delta)
    dz = ca.embed(trained_repnet, x + delta) - ca.embed(trained_repnet, x)
    lhs = np.sum(dz**2)
    rhs = np.sum((jac @ delta) ** 2)
    assert abs(lhs - rhs) <= 0.10 * rhs


def test_monotonic_head_zero_treatment_is_zero():
    net = rn.build_repnet(TS4, d=5, head="monotonic", d_z=6, seed=0)
    z = np.random.default_rng(1).normal(size=6)
    assert ca.predict_revenue(net, z, 0) == 0.0


def test_monotonic_head_nondecreasing_at_init():
    net = rn.build_repnet(TS4, d=5, head="monotonic", d_z=6, seed=2)
    rng = np.random.default_rng(3)
    z = rng.normal(size=(1000, 6))
    preds = ca.predict_revenue_matrix(net, z)
    assert np.all(np.diff(preds, axis=1) >= 0)


def test_monotonic_head_closed_form():
    # 1x1 hypernetworks with hand-set weights: r = a * tanh(b * t_norm)
    a, b = 0.7, 2.5
    w_inner = nn.Mlp(layers=[nn.Layer(w=np.array([[b]]), b=np.zeros(1), activation="identity")])
    w_outer = nn.Mlp(layers=[nn.Layer(w=np.array([[a]]), b=np.zeros(1), activation="identity")])
    head = rn.MonotonicHead(w_inner=w_inner, w_outer=w_outer, repeat_dim=1)
    net = rn.RepNet(
        standardizer=nn.Standardizer.identity(1),
        rep=nn.Mlp(layers=[nn.Layer(w=np.eye(1), b=np.zeros(1), activation="identity")]),
        revenue_head=head,
        propensity_head=nn.mlp_init((1, 4), "identity", np.random.default_rng(0)),
        alpha=1.0,
        treatment_set=TS4,
    )
    z = np.array([1.0])
    for t in range(4):
        t_norm = TS4.normalized()[t]
        expected = a * np.tanh(b * t_norm)
        assert np.isclose(ca.predict_revenue(net, z, t), expected, rtol=1e-12)


def test_predict_revenue_range_check(trained_repnet):
    z = np.zeros(trained_repnet.d_z)
    with pytest.raises(ca.ClusterAllocError):
        ca.predict_revenue(trained_repnet, z, 4)


def test_propensity_uniform_logits():
    net = rn.build_repnet(TS4, d=3, d_z=5, seed=0)
    for layer in net.propensity_head.layers:
        layer.w[:] = 0.0
        layer.b[:] = 0.0
    p = ca.predict_propensity(net, np.ones(5))
    assert np.allclose(p, 0.25, atol=1e-12)


def test_propensity_normalization(trained_repnet):
    rng = np.random.default_rng(4)
    z = rng.normal(size=(1000, trained_repnet.d_z))
    p = ca.predict_propensity(trained_repnet, z)
    assert np.all(p >= 0)
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-9)


def test_propensity_matches_empirical_frequencies(small_rct, trained_repnet):
    _, dataset, _ = small_rct
    z = ca.embed(trained_repnet, dataset.features)
    mean_pred = ca.predict_propensity(trained_repnet, z).mean(axis=0)
    emp = np.bincount(dataset.treatment, minlength=4) / dataset.n
    assert np.all(np.abs(mean_pred - emp) < 0.05)


def test_alpha_zero_decouples_propensity(small_rct):
    _, dataset, _ = small_rct
    net = rn.build_repnet(
        dataset.treatment_set, dataset.feature_dim, head="concat", d_z=6, alpha=0.0, seed=5,
        standardizer=nn.Standardizer.fit(dataset.features),
    )
    before = [p.copy() for p in nn.mlp_parameters(net.propensity_head)]
    xs = net.standardizer.transform(dataset.features[:64])
    _, pairs = rn._repnet_batch_loss(net, xs, dataset.treatment[:64], dataset.revenue[:64])
    prop_grads = [g for sub, g in pairs if sub is net.propensity_head][0]
    assert all(np.all(g == 0) for g in prop_grads.flat())
    # and a short training run leaves the head untouched (weight decay off)
    trained, _ = ca.train_repnet(
        dataset, head="concat", d_z=6, alpha=0.0,
        config=ca.TrainConfig(learning_rate=0.05, epochs=2, batch_size=128, seed=5),
    )
    after = nn.mlp_parameters(trained.propensity_head)
    assert all(np.array_equal(a, b) for a, b in zip(before, after))


def test_repnet_training_determinism(small_rct):
    _, dataset, _ = small_rct
    cfg = ca.TrainConfig(learning_rate=0.05, epochs=3, batch_size=256, seed=1)
    n1, t1 = ca.train_repnet(dataset, d_z=6, config=cfg, hidden=(16,))
    n2, t2 = ca.train_repnet(dataset, d_z=6, config=cfg, hidden=(16,))
    assert t1 == t2
    assert all(
        np.array_equal(a, b)
        for a, b in zip(rn.repnet_parameters(n1), rn.repnet_parameters(n2))
    )


def linear_response_rct(n, d=4, m=3, sigma=0.5, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, d))
    t = rng.integers(m, size=n)
    w = np.array([1.0, -0.5, 0.25, 0.8][:d])
    arm_effect = np.array([0.0, 1.0, 2.0][:m])
    r = x @ w + arm_effect[t] + sigma * rng.normal(size=n)
    return ca.Dataset(
        features=x,
        treatment=t,
        cost=np.zeros(n),
        revenue=r,
        propensity=np.full(n, 1.0 / m),
        kind=ca.DatasetKind.RCT,
        treatment_set=ca.TreatmentSet.from_values(np.linspace(0, 1, m)),
    ), w, arm_effect, sigma


def test_rct_training_recovers_linear_response():
    ds, w, arm_effect, sigma = linear_response_rct(6000)
    held, *_ = linear_response_rct(2000, seed=99)
    net, _ = ca.train_repnet(
        ds, head="concat", d_z=8, alpha=0.5,
        config=ca.TrainConfig(learning_rate=0.05, epochs=40, batch_size=256, seed=0),
        hidden=(32,),
    )
    z = ca.embed(net, held.features)
    preds = np.array(
        [ca.predict_revenue(net, z[i], int(held.treatment[i])) for i in range(0, held.n, 4)]
    )
    actual = held.revenue[::4]
    rmse = np.sqrt(np.mean((preds - actual) ** 2))
    assert rmse < 1.2 * sigma


def test_monotonic_head_trained_stays_monotone(small_rct, trained_monotonic):
    _, dataset, _ = small_rct
    z = ca.embed(trained_monotonic, dataset.features[:2000])
    preds = ca.predict_revenue_matrix(trained_monotonic, z)
    assert np.all(np.diff(preds, axis=1) >= 0)


def test_repnet_gradients_match_finite_differences():
    for head in ("concat", "monotonic"):
        for seed in range(3):
            rng = np.random.default_rng(seed)
            net = rn.build_repnet(
                TS4, d=4, head=head, d_z=5, alpha=0.6,
                hidden=(6,), head_hidden=(5,), hyper_hidden=(4,), repeat_dim=3, seed=seed,
            )
            xs = rng.normal(size=(6, 4))
            t = rng.integers(4, size=6)
            y = rng.normal(size=6)
            _, pairs = rn._repnet_batch_loss(net, xs, t, y)
            analytic = []
            for _, g in pairs:
                analytic.extend(g.flat())
            numeric = nn.numeric_gradient(
                lambda: rn.repnet_loss_value(net, xs, t, y), rn.repnet_parameters(net), 1e-5
            )
            err = max(nn.max_relative_error(a, b) for a, b in zip(analytic, numeric))
            assert err < 1e-4, f"{head} seed {seed}: {err}"


def test_distill_single_cluster(small_rct, trained_repnet):
    _, dataset, _ = small_rct
    z = ca.embed(trained_repnet, dataset.features)
    model = ca.kmeans_fit(z, k=1, seed=0)
    clf, _ = ca.distill(
        trained_repnet, model, dataset,
        ca.TrainConfig(learning_rate=0.1, epochs=2, batch_size=256, seed=0),
    )
    preds = ca.classify(clf, dataset.features)
    assert np.all(preds == 0)


def test_distill_agreement_and_class_proportions(small_rct, trained_repnet, cluster_artifacts):
    _, dataset, _ = small_rct
    model, labels, _ = cluster_artifacts
    clf, _ = ca.distill(
        trained_repnet, model, dataset,
        ca.TrainConfig(learning_rate=0.1, epochs=40, batch_size=256, seed=0),
    )
    preds = ca.classify(clf, dataset.features)
    agreement = (preds == labels).mean()
    assert agreement >= 0.90
    pred_props = np.bincount(preds, minlength=model.k) / dataset.n
    true_props = np.bincount(labels, minlength=model.k) / dataset.n
    assert np.all(np.abs(pred_props - true_props) < 0.05)


def test_classify_shift_invariance(small_rct, trained_repnet, cluster_artifacts):
    _, dataset, _ = small_rct
    model, _, _ = cluster_artifacts
    clf, _ = ca.distill(
        trained_repnet, model, dataset,
        ca.TrainConfig(learning_rate=0.1, epochs=3, batch_size=256, seed=0),
    )
    x = dataset.features[:100]
    before = ca.classify(clf, x)
    clf.net.layers[-1].b += 5.0  # constant shift of every logit
    assert np.array_equal(ca.classify(clf, x), before)


def test_repnet_checkpoint_roundtrip(tmp_path, trained_repnet, trained_monotonic):
    for net in (trained_repnet, trained_monotonic):
        path = tmp_path / "net.ckpt"
        rn.save_repnet(path, net)
        back = rn.load_repnet(path)
        x = np.random.default_rng(0).normal(size=(5, net.standardizer.mean.size))
        assert np.array_equal(ca.embed(net, x), ca.embed(back, x))
        z = ca.embed(net, x)
        assert np.array_equal(
            ca.predict_revenue_matrix(net, z), ca.predict_revenue_matrix(back, z)
        )
