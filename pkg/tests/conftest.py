import numpy as np
import pytest

import clusteralloc as ca


@pytest.fixture(scope="session")
def small_rct():
    """A small separable RCT dataset with ground truth, shared across tests."""
    cfg = ca.default_config(n=6000, d=8, m=4, g=4, seed=11, signal_radius=3.5)
    dataset, truth = ca.generate_rct(cfg)
    return cfg, dataset, truth


@pytest.fixture(scope="session")
def trained_repnet(small_rct):
    cfg, dataset, _ = small_rct
    net, trace = ca.train_repnet(
        dataset,
        head="concat",
        d_z=8,
        alpha=1.0,
        config=ca.TrainConfig(learning_rate=0.05, epochs=15, batch_size=256, seed=0),
        hidden=(32,),
    )
    assert trace[-1] < trace[0]
    return net


@pytest.fixture(scope="session")
def trained_monotonic(small_rct):
    cfg, dataset, _ = small_rct
    net, _ = ca.train_repnet(
        dataset,
        head="monotonic",
        d_z=8,
        alpha=1.0,
        config=ca.TrainConfig(learning_rate=0.05, epochs=15, batch_size=256, seed=0),
        hidden=(32,),
    )
    return net


@pytest.fixture(scope="session")
def cluster_artifacts(small_rct, trained_repnet):
    _, dataset, _ = small_rct
    z = ca.embed(trained_repnet, dataset.features)
    model = ca.kmeans_fit(z, k=8, n_init=2, seed=0)
    labels = ca.assign(model, z)
    stats = ca.cluster_stats(dataset, labels, k=8, repnet=trained_repnet)
    return model, labels, stats


def make_stats(mu_r, sd_r, mu_c, sd_c, sizes):
    """Hand-built ClusterStats for solver tests."""
    mu_r = np.asarray(mu_r, dtype=np.float64)
    k, m = mu_r.shape
    sizes = np.asarray(sizes, dtype=np.int64)
    counts = np.zeros((k, m), dtype=np.int64)
    counts[:, 0] = sizes
    return ca.ClusterStats(
        mu_r=mu_r,
        sd_r=np.asarray(sd_r, dtype=np.float64),
        mu_c=np.asarray(mu_c, dtype=np.float64),
        sd_c=np.asarray(sd_c, dtype=np.float64),
        counts=counts,
        sizes=sizes,
        imputed=np.zeros((k, m), dtype=bool),
    )


def random_stats(rng, k, m, size_scale=10):
    """Random solver instance with nonnegative costs and unit-ish sizes."""
    return make_stats(
        mu_r=rng.uniform(0.0, 3.0, size=(k, m)),
        sd_r=rng.uniform(0.0, 1.0, size=(k, m)),
        mu_c=rng.uniform(0.0, 2.0, size=(k, m)),
        sd_c=rng.uniform(0.0, 0.5, size=(k, m)),
        sizes=rng.integers(1, size_scale, size=k),
    )
