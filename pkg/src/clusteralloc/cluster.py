"""K-means over hidden representations and per-(cluster, arm) statistics.

The quantizer is plain Lloyd's algorithm with k-means++ seeding and a fixed
empty-cluster rule (reseed at the point farthest from its own center), best
of ``n_init`` restarts by inertia, fully deterministic given the seed.
Cluster statistics are the solver inputs: mean/std of revenue and cost per
(cluster, logged arm) cell plus cluster sizes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset, DatasetKind
from .errors import ClusterAllocError, DatasetError

THIN_CELL_THRESHOLD = 5


@dataclass(frozen=True)
class ClusterModel:
    """Fitted centers; ``inertia`` is the final within-cluster sum of squares."""

    centers: np.ndarray  # (k, d_z)
    inertia: float

    def __post_init__(self):
        centers = np.ascontiguousarray(self.centers, dtype=np.float64)
        centers.flags.writeable = False
        object.__setattr__(self, "centers", centers)
        if centers.ndim != 2 or centers.shape[0] < 1:
            raise ClusterAllocError("centers must be a nonempty (k, d) array")
        if not np.all(np.isfinite(centers)):
            raise ClusterAllocError("non-finite cluster center")
        if self.inertia < 0:
            raise ClusterAllocError("negative inertia")
        if self.k > 1:
            d2 = _sq_distances(centers, centers)
            np.fill_diagonal(d2, np.inf)
            if d2.min() < 1e-12:
                raise ClusterAllocError("two cluster centers coincide")

    @property
    def k(self) -> int:
        return int(self.centers.shape[0])


def _sq_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # Explicit differences (not the expanded quadratic) so exact ties stay exact.
    return ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)


def _assign_batch(z: np.ndarray, centers: np.ndarray, chunk: int = 4096) -> np.ndarray:
    n = z.shape[0]
    out = np.empty(n, dtype=np.int64)
    for start in range(0, n, chunk):
        d2 = _sq_distances(z[start : start + chunk], centers)
        out[start : start + chunk] = np.argmin(d2, axis=1)
    return out


def _kmeanspp_seed(z: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = z.shape[0]
    centers = np.empty((k, z.shape[1]))
    first = rng.integers(n)
    centers[0] = z[first]
    d2 = ((z - centers[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=d2 / total)
        centers[i] = z[idx]
        d2 = np.minimum(d2, ((z - centers[i]) ** 2).sum(axis=1))
    return centers


def _lloyd(z: np.ndarray, centers: np.ndarray, max_iters: int):
    labels = _assign_batch(z, centers)
    for _ in range(max_iters):
        new_centers = centers.copy()
        for j in range(centers.shape[0]):
            members = labels == j
            if members.any():
                new_centers[j] = z[members].mean(axis=0)
        # empty clusters: reseed at the point farthest from its assigned center
        own_d2 = ((z - new_centers[labels]) ** 2).sum(axis=1)
        for j in range(centers.shape[0]):
            if not (labels == j).any():
                far = int(np.argmax(own_d2))
                new_centers[j] = z[far]
                own_d2[far] = -1.0
        new_labels = _assign_batch(z, new_centers)
        centers = new_centers
        if np.array_equal(new_labels, labels):
            labels = new_labels
            break
        labels = new_labels
    inertia = float(((z - centers[labels]) ** 2).sum())
    return centers, labels, inertia


def kmeans_fit(
    z: np.ndarray,
    k: int,
    max_iters: int = 100,
    n_init: int = 4,
    seed: int = 0,
) -> ClusterModel:
    """Lloyd's algorithm with k-means++ seeding, best of ``n_init`` restarts.

    Deterministic given ``seed``. Raises if ``k`` exceeds the number of
    points or the input is empty.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] == 0:
        raise ClusterAllocError("kmeans_fit needs a nonempty (n, d) array")
    if k < 1 or k > z.shape[0]:
        raise ClusterAllocError(f"k={k} must be in [1, {z.shape[0]}]")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(n_init, 1)):
        centers = _kmeanspp_seed(z, k, rng)
        centers, _, inertia = _lloyd(z, centers, max_iters)
        if best is None or inertia < best[1]:
            best = (centers, inertia)
    return ClusterModel(centers=best[0], inertia=best[1])


def assign(model: ClusterModel, z: np.ndarray) -> int | np.ndarray:
    """Nearest center by Euclidean distance; exact ties go to the lowest index."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 1:
        return int(_assign_batch(z[None, :], model.centers)[0])
    return _assign_batch(z, model.centers)


# ---------------------------------------------------------------------------
# cluster statistics


@dataclass(frozen=True)
class ClusterStats:
    """Per (cluster, arm) outcome statistics used by the budget solver.

    ``mu_*``/``sd_*`` are (k, m) means and population stds of revenue and
    cost, ``counts`` the cell sample counts, ``sizes`` the cluster sizes,
    and ``imputed`` flags cells whose statistics were filled in because the
    cell was empty or thinner than :data:`THIN_CELL_THRESHOLD`.
    """

    mu_r: np.ndarray
    sd_r: np.ndarray
    mu_c: np.ndarray
    sd_c: np.ndarray
    counts: np.ndarray
    sizes: np.ndarray
    imputed: np.ndarray

    def __post_init__(self):
        k, m = self.mu_r.shape
        for name in ("mu_r", "sd_r", "mu_c", "sd_c", "counts", "imputed"):
            arr = getattr(self, name)
            if arr.shape != (k, m):
                raise ClusterAllocError(f"{name} must have shape ({k}, {m})")
        if self.sizes.shape != (k,):
            raise ClusterAllocError(f"sizes must have shape ({k},)")
        if np.any(self.sd_r < 0) or np.any(self.sd_c < 0):
            raise ClusterAllocError("negative std in cluster stats")
        if np.any(self.counts.sum(axis=1) != self.sizes):
            raise ClusterAllocError("cell counts do not sum to cluster sizes")

    @property
    def k(self) -> int:
        return int(self.mu_r.shape[0])

    @property
    def m(self) -> int:
        return int(self.mu_r.shape[1])

    @property
    def n(self) -> int:
        return int(self.sizes.sum())


def _weighted_mean_std(values: np.ndarray, weights: np.ndarray) -> tuple[float, float]:
    wsum = weights.sum()
    mean = float((weights * values).sum() / wsum)
    var = float((weights * (values - mean) ** 2).sum() / wsum)
    return mean, float(np.sqrt(max(var, 0.0)))


def cluster_stats(
    dataset: Dataset,
    assignments: np.ndarray,
    k: int,
    repnet=None,
) -> ClusterStats:
    """Cell statistics over (cluster assignment, logged arm).

    Means/stds are plain within-cell moments for RCT data and inverse-
    propensity weighted for OBS data (population std either way). Cells with
    fewer than :data:`THIN_CELL_THRESHOLD` samples are imputed and flagged:
    the revenue mean comes from ``repnet`` predictions averaged over the
    cluster's members when a model is given (pooled per-arm mean otherwise),
    the cost mean from the pooled per-arm mean, and both stds from the
    pooled per-arm std.
    """
    assignments = np.asarray(assignments, dtype=np.int64)
    if assignments.shape != (dataset.n,):
        raise DatasetError("one cluster assignment per sample required")
    if assignments.size and (assignments.min() < 0 or assignments.max() >= k):
        raise DatasetError(f"cluster assignment outside [0, {k})")
    m = dataset.treatment_set.count
    w = (
        1.0 / dataset.propensity
        if dataset.kind is DatasetKind.OBS
        else np.ones(dataset.n)
    )

    mu_r = np.zeros((k, m))
    sd_r = np.zeros((k, m))
    mu_c = np.zeros((k, m))
    sd_c = np.zeros((k, m))
    counts = np.zeros((k, m), dtype=np.int64)
    imputed = np.zeros((k, m), dtype=bool)
    sizes = np.bincount(assignments, minlength=k).astype(np.int64)

    # pooled per-arm fallbacks
    pooled_mu_r = np.zeros(m)
    pooled_sd_r = np.zeros(m)
    pooled_mu_c = np.zeros(m)
    pooled_sd_c = np.zeros(m)
    for j in range(m):
        mask = dataset.treatment == j
        if mask.any():
            pooled_mu_r[j], pooled_sd_r[j] = _weighted_mean_std(dataset.revenue[mask], w[mask])
            pooled_mu_c[j], pooled_sd_c[j] = _weighted_mean_std(dataset.cost[mask], w[mask])

    if repnet is not None:
        from .repnet import embed, predict_revenue_matrix

        pred_all = predict_revenue_matrix(repnet, embed(repnet, dataset.features))

    for i in range(k):
        members = assignments == i
        for j in range(m):
            cell = members & (dataset.treatment == j)
            counts[i, j] = int(cell.sum())
            if counts[i, j] >= THIN_CELL_THRESHOLD:
                mu_r[i, j], sd_r[i, j] = _weighted_mean_std(dataset.revenue[cell], w[cell])
                mu_c[i, j], sd_c[i, j] = _weighted_mean_std(dataset.cost[cell], w[cell])
            else:
                imputed[i, j] = True
                if repnet is not None and members.any():
                    mu_r[i, j] = float(pred_all[members, j].mean())
                else:
                    mu_r[i, j] = pooled_mu_r[j]
                mu_c[i, j] = pooled_mu_c[j]
                sd_r[i, j] = pooled_sd_r[j]
                sd_c[i, j] = pooled_sd_c[j]

    return ClusterStats(
        mu_r=mu_r, sd_r=sd_r, mu_c=mu_c, sd_c=sd_c,
        counts=counts, sizes=sizes, imputed=imputed,
    )


# ---------------------------------------------------------------------------
# JSON serialization (schema used by the pipeline artifacts)


def cluster_model_to_dict(model: ClusterModel) -> dict:
    return {
        "format": "cluster-model-v1",
        "k": model.k,
        "centers": model.centers.tolist(),
        "inertia": model.inertia,
    }


def cluster_model_from_dict(doc: dict) -> ClusterModel:
    if doc.get("format") != "cluster-model-v1":
        raise ClusterAllocError(f"unsupported cluster model format {doc.get('format')!r}")
    return ClusterModel(centers=np.asarray(doc["centers"]), inertia=float(doc["inertia"]))


def cluster_stats_to_dict(stats: ClusterStats) -> dict:
    return {
        "format": "cluster-stats-v1",
        "k": stats.k,
        "m": stats.m,
        "mu_r": stats.mu_r.tolist(),
        "sd_r": stats.sd_r.tolist(),
        "mu_c": stats.mu_c.tolist(),
        "sd_c": stats.sd_c.tolist(),
        "counts": stats.counts.tolist(),
        "sizes": stats.sizes.tolist(),
        "imputed": stats.imputed.astype(int).tolist(),
    }


def cluster_stats_from_dict(doc: dict) -> ClusterStats:
    if doc.get("format") != "cluster-stats-v1":
        raise ClusterAllocError(f"unsupported cluster stats format {doc.get('format')!r}")
    return ClusterStats(
        mu_r=np.asarray(doc["mu_r"], dtype=np.float64),
        sd_r=np.asarray(doc["sd_r"], dtype=np.float64),
        mu_c=np.asarray(doc["mu_c"], dtype=np.float64),
        sd_c=np.asarray(doc["sd_c"], dtype=np.float64),
        counts=np.asarray(doc["counts"], dtype=np.int64),
        sizes=np.asarray(doc["sizes"], dtype=np.int64),
        imputed=np.asarray(doc["imputed"], dtype=bool),
    )
