"""Clustering head, self-training losses and the three training regimes."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .autoencoder import (
    AdamaxState,
    CaeModel,
    DivergenceError,
    adamax_step,
    backward,
    encode,
    forward,
    reconstruction_grad,
    reconstruction_loss,
)
from .config import TrainConfig
from .dataset import batch_iter

log = logging.getLogger(__name__)

__all__ = [
    "ClusterHead",
    "KMeansResult",
    "HistoryEntry",
    "ClusteringRun",
    "TrainConfig",
    "kmeans",
    "lloyd",
    "kmeans_plusplus",
    "soft_assign",
    "target_distribution",
    "kl_loss",
    "clustering_gradients",
    "hard_assign",
    "joint_train",
    "dec_train",
    "cae_kmeans",
]


@dataclass
class ClusterHead:
    centroids: np.ndarray

    def __post_init__(self):
        c = self.centroids
        if c.ndim != 2 or c.shape[0] < 1:
            raise ValueError(f"centroids must be [k, d], got {c.shape}")
        if len(np.unique(c, axis=0)) != c.shape[0]:
            raise ValueError("centroids must be pairwise distinct")

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    def copy(self) -> "ClusterHead":
        return ClusterHead(self.centroids.copy())


# ---------------------------------------------------------------------------
# k-means
# ---------------------------------------------------------------------------

@dataclass
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    inertia: float
    inertia_history: list[float] = field(default_factory=list)


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    d = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    return d


def kmeans_plusplus(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    centroids = [points[rng.integers(n)]]
    closest = _sq_dists(points, centroids[0][None]).ravel()
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            idx = rng.choice(n, p=closest / total)
        else:
            idx = rng.integers(n)
        centroids.append(points[idx])
        closest = np.minimum(closest, _sq_dists(points, points[idx][None]).ravel())
    return np.array(centroids)


def _assign(points: np.ndarray, centroids: np.ndarray):
    """Nearest-centroid labels. An empty cluster's centroid is moved onto the
    point farthest from its own centroid, taken from a cluster of size > 1."""
    k = len(centroids)
    d = _sq_dists(points, centroids)
    labels = d.argmin(axis=1)
    cost = d[np.arange(len(points)), labels]
    counts = np.bincount(labels, minlength=k)
    for j in np.flatnonzero(counts == 0):
        donor = np.where(counts[labels] > 1, cost, -1.0)
        far = int(donor.argmax())
        counts[labels[far]] -= 1
        labels[far] = j
        counts[j] = 1
        centroids[j] = points[far]
        cost[far] = 0.0
    return labels, float(cost.sum())


def _inertia(points: np.ndarray, centroids: np.ndarray, labels: np.ndarray) -> float:
    return float(((points - centroids[labels]) ** 2).sum())


def lloyd(points: np.ndarray, centroids: np.ndarray, max_iter: int = 300) -> KMeansResult:
    """Lloyd iterations from the given centroids until labels stop changing.

    ``inertia_history`` records the inertia after every assignment and every
    centroid update.
    """
    centroids = np.array(centroids, dtype=np.float64)
    k = len(centroids)
    labels, cost = _assign(points, centroids)
    history = [cost]
    for _ in range(max_iter):
        centroids = np.array([points[labels == j].mean(axis=0) for j in range(k)])
        history.append(_inertia(points, centroids, labels))
        new_labels, cost = _assign(points, centroids)
        history.append(cost)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    return KMeansResult(centroids, labels, _inertia(points, centroids, labels), history)


def kmeans(points: np.ndarray, k: int, restarts: int = 20, seed: int = 0, max_iter: int = 300) -> KMeansResult:
    """Best of ``restarts`` k-means++ seeded Lloyd runs, by inertia.

    Computation is in float64; restart ``r`` draws from a generator seeded
    with ``(seed, r)``, so fewer restarts see a prefix of the same runs.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ValueError(f"points must be [n, d], got {points.shape}")
    n = len(points)
    if k < 1 or n < k:
        raise ValueError(f"need at least k={k} points, got {n}")
    if restarts < 1:
        raise ValueError("restarts must be >= 1")
    best = None
    for r in range(restarts):
        rng = np.random.default_rng([seed, r])
        res = lloyd(points, kmeans_plusplus(points, k, rng), max_iter=max_iter)
        if best is None or res.inertia < best.inertia:
            best = res
    return best


# ---------------------------------------------------------------------------
# soft assignment and self-training loss
# ---------------------------------------------------------------------------

def _kernel(z: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Unnormalised Student's t kernel (1 + |z_i - mu_j|^2)^-1."""
    return 1.0 / (1.0 + _sq_dists(z, centroids))


def soft_assign(z: np.ndarray, head: ClusterHead) -> np.ndarray:
    if z.ndim != 2 or z.shape[1] != head.centroids.shape[1]:
        raise ValueError(f"embeddings {z.shape} do not match centroids {head.centroids.shape}")
    w = _kernel(z, head.centroids)
    return w / w.sum(axis=1, keepdims=True)


def target_distribution(q: np.ndarray) -> np.ndarray:
    weight = q**2 / q.sum(axis=0)
    return weight / weight.sum(axis=1, keepdims=True)


def kl_loss(p: np.ndarray, q: np.ndarray) -> float:
    """KL(P || Q) summed over all entries; zero entries of P contribute nothing."""
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {q.shape}")
    mask = p > 0
    return float(np.sum(p[mask] * (np.log(p[mask]) - np.log(q[mask]))))


def clustering_gradients(z: np.ndarray, head: ClusterHead, p: np.ndarray, q: np.ndarray):
    """Gradients of ``kl_loss(p, soft_assign(z, head))`` with ``p`` held fixed.

    Returns ``(d_z, d_centroids)``.
    """
    mu = head.centroids
    if z.ndim != 2 or z.shape[1] != mu.shape[1]:
        raise ValueError(f"embeddings {z.shape} do not match centroids {mu.shape}")
    if p.shape != (len(z), len(mu)) or q.shape != p.shape:
        raise ValueError(f"P {p.shape} / Q {q.shape} inconsistent with {len(z)} points, {len(mu)} centroids")
    w = _kernel(z, mu)
    # rows of P need not sum to 1 here, so keep the row mass explicit
    coef = 2.0 * w * (p - q * p.sum(axis=1, keepdims=True))
    diff = z[:, None, :] - mu[None, :, :]
    d_pairs = coef[:, :, None] * diff
    return d_pairs.sum(axis=1), -d_pairs.sum(axis=0)


def hard_assign(q: np.ndarray) -> np.ndarray:
    # argmax returns the first maximum, i.e. the lowest cluster index on ties
    return np.argmax(q, axis=1)


# ---------------------------------------------------------------------------
# training regimes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HistoryEntry:
    iteration: int
    loss: float
    rec_loss: float
    clu_loss: float
    label_change: float


@dataclass
class ClusteringRun:
    model: CaeModel
    head: ClusterHead
    labels: np.ndarray
    history: list[HistoryEntry]
    q: np.ndarray
    embeddings: np.ndarray
    initial_head: ClusterHead
    iterations: int = 0
    converged: bool = False


def _images(dataset) -> np.ndarray:
    return dataset.tensors if hasattr(dataset, "tensors") else np.asarray(dataset)


def _self_train(model: CaeModel, dataset, k: int, config: TrainConfig, lambda_rec: float, keep_decoder: bool):
    x = _images(dataset)
    n = len(x)
    if n < k:
        raise ValueError(f"dataset has {n} samples, fewer than k={k}")
    model = model.copy()
    z = encode(model, x)
    km = kmeans(z, k, config.kmeans_restarts, config.seed)
    head = ClusterHead(km.centroids.astype(model.params["embed_w"].dtype))
    initial_head = head.copy()
    opt_model = AdamaxState.from_config(config)
    opt_head = AdamaxState.from_config(config)
    use_rec = keep_decoder and lambda_rec > 0
    w_rec, w_clu = lambda_rec, 1.0 - lambda_rec

    history: list[HistoryEntry] = []
    prev_labels = None
    p_full = q_full = labels = None
    sums = np.zeros(3)
    n_batches = 0
    epoch, batches = 0, []
    it = 0
    converged = False
    while True:
        if it % config.update_interval == 0 or it >= config.max_iterations:
            z = encode(model, x)
            q_full = soft_assign(z, head)
            p_full = target_distribution(q_full)
            labels = hard_assign(q_full)
            if prev_labels is not None:
                change = float(np.mean(labels != prev_labels))
                mean = sums / max(n_batches, 1)
                history.append(HistoryEntry(it, float(mean[0]), float(mean[1]), float(mean[2]), change))
                log.debug("iteration %d: label change %.5f, loss %.6f", it, change, mean[0])
                if change < config.tolerance:
                    converged = True
                    break
            prev_labels = labels
            sums[:] = 0.0
            n_batches = 0
        if it >= config.max_iterations:
            break
        if not batches:
            batches = batch_iter(n, config.batch_size, shuffle=True, seed=config.seed, epoch=epoch)
            epoch += 1
        idx = batches.pop(0)
        xb = x[idx]
        cache = forward(model, xb, decode=use_rec)
        zb = cache.z
        qb = soft_assign(zb, head)
        pb = p_full[idx].astype(qb.dtype)
        bsz = len(idx)
        l_clu = kl_loss(pb, qb) / bsz
        d_z, d_mu = clustering_gradients(zb, head, pb, qb)
        d_z *= w_clu / bsz
        d_mu *= w_clu / bsz
        l_rec = 0.0
        d_x_hat = None
        if use_rec:
            l_rec = reconstruction_loss(cache.x_hat, xb)
            d_x_hat = w_rec * reconstruction_grad(cache.x_hat, xb)
        loss = w_rec * l_rec + w_clu * l_clu
        if not np.isfinite(loss):
            raise DivergenceError(f"non-finite loss at iteration {it}")
        grads = backward(model, cache, d_z=d_z, d_x_hat=d_x_hat)
        adamax_step(model.params, grads, opt_model)
        adamax_step({"centroids": head.centroids}, {"centroids": d_mu}, opt_head)
        sums += (loss, l_rec, l_clu)
        n_batches += 1
        it += 1

    return ClusteringRun(
        model=model,
        head=head,
        labels=labels,
        history=history,
        q=q_full,
        embeddings=z,
        initial_head=initial_head,
        iterations=it,
        converged=converged,
    )


def joint_train(model: CaeModel, dataset, k: int, config: TrainConfig | None = None) -> ClusteringRun:
    """Minimise ``lambda * L_rec + (1 - lambda) * L_clu`` with the decoder attached.

    Centroids start from k-means on the pretrained embedding. Every
    ``update_interval`` mini-batch steps the target distribution and hard
    labels are recomputed on the full dataset; training stops once the
    fraction of changed labels drops below ``tolerance``.
    """
    config = config or TrainConfig()
    return _self_train(model, dataset, k, config, config.lambda_rec, keep_decoder=True)


def dec_train(model: CaeModel, dataset, k: int, config: TrainConfig | None = None) -> ClusteringRun:
    """Clustering loss only; the decoder is left untouched."""
    config = config or TrainConfig()
    return _self_train(model, dataset, k, config, 0.0, keep_decoder=False)


def cae_kmeans(model: CaeModel, dataset, k: int, restarts: int = 20, seed: int = 0):
    """k-means on the pretrained embedding; returns ``(head, labels)``."""
    z = encode(model, _images(dataset))
    km = kmeans(z, k, restarts, seed)
    return ClusterHead(km.centroids.astype(z.dtype)), km.labels
