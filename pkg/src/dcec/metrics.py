"""Clustering validity indices and unsupervised accuracy."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist


@dataclass
class MetricsReport:
    k: int
    n: int
    silhouette: float
    calinski_harabasz: float
    acc: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def _as_labels(labels, n: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    return labels


def silhouette(z: np.ndarray, labels) -> float:
    """Mean silhouette coefficient with Euclidean distances.

    Points in singleton clusters score 0.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 1:
        z = z[:, None]
    labels = _as_labels(labels, len(z))
    ids, inv, counts = np.unique(labels, return_inverse=True, return_counts=True)
    if len(ids) < 2:
        raise ValueError("silhouette needs at least two clusters")
    dist = cdist(z, z)
    onehot = np.zeros((len(z), len(ids)))
    onehot[np.arange(len(z)), inv] = 1.0
    # sum of distances from each point to every cluster
    sums = dist @ onehot
    own = counts[inv]
    a = sums[np.arange(len(z)), inv] / np.maximum(own - 1, 1)
    mean_other = sums / counts
    mean_other[np.arange(len(z)), inv] = np.inf
    b = mean_other.min(axis=1)
    denom = np.maximum(a, b)
    s = np.where(denom > 0, (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    s[own == 1] = 0.0
    return float(s.mean())


def calinski_harabasz(z: np.ndarray, labels) -> float:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 1:
        z = z[:, None]
    n = len(z)
    labels = _as_labels(labels, n)
    ids, inv, counts = np.unique(labels, return_inverse=True, return_counts=True)
    k = len(ids)
    if not 2 <= k < n:
        raise ValueError(f"Calinski-Harabasz needs 2 <= k < n, got k={k}, n={n}")
    centers = np.zeros((k, z.shape[1]))
    np.add.at(centers, inv, z)
    centers /= counts[:, None]
    within = float(((z - centers[inv]) ** 2).sum())
    between = float((counts * ((centers - z.mean(axis=0)) ** 2).sum(axis=1)).sum())
    if within == 0.0:
        raise ValueError("degenerate dispersion: every point sits on its cluster centre")
    return between / within * (n - k) / (k - 1)


def optimal_assignment(cost) -> np.ndarray:
    """Permutation ``perm`` minimising ``sum(cost[i, perm[i]])``."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ValueError(f"cost matrix must be square, got {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix must be finite")
    rows, cols = linear_sum_assignment(cost)
    perm = np.empty(len(rows), dtype=np.int64)
    perm[rows] = cols
    return perm


def unsupervised_accuracy(true_labels, cluster_labels) -> float:
    """Best accuracy over one-to-one maps from cluster ids to labels."""
    t = np.asarray(true_labels)
    c = np.asarray(cluster_labels)
    if t.shape != c.shape or t.ndim != 1:
        raise ValueError(f"label vectors differ in shape: {t.shape} vs {c.shape}")
    if len(t) == 0:
        raise ValueError("need at least one sample")
    t_ids, t_inv = np.unique(t, return_inverse=True)
    c_ids, c_inv = np.unique(c, return_inverse=True)
    size = max(len(t_ids), len(c_ids))
    confusion = np.zeros((size, size), dtype=np.int64)
    np.add.at(confusion, (c_inv, t_inv), 1)
    perm = optimal_assignment(-confusion)
    return float(confusion[np.arange(size), perm].sum() / len(t))


def evaluate(z: np.ndarray, labels, true_labels=None) -> MetricsReport:
    labels = np.asarray(labels)
    return MetricsReport(
        k=int(len(np.unique(labels))),
        n=int(len(labels)),
        silhouette=silhouette(z, labels),
        calinski_harabasz=calinski_harabasz(z, labels),
        acc=None if true_labels is None else unsupervised_accuracy(true_labels, labels),
    )
