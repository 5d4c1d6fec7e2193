"""k-means with k-means++ seeding, used as the clustering baseline."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class KMeansResult:
    labels: np.ndarray
    centroids: np.ndarray
    inertia_history: list = field(default_factory=list)
    n_iter: int = 0


def _sq_dists(x, centroids):
    d = (x * x).sum(1)[:, None] - 2.0 * x @ centroids.T + (centroids * centroids).sum(1)[None, :]
    return np.maximum(d, 0.0)


def kmeans_pp_init(x: np.ndarray, n_clusters: int, rng: np.random.Generator) -> np.ndarray:
    """D^2-weighted seeding; falls back to uniform draws when all distances vanish."""
    m = x.shape[0]
    centroids = [x[rng.integers(m)]]
    closest = _sq_dists(x, np.asarray(centroids))[:, 0]
    for _ in range(1, n_clusters):
        total = closest.sum()
        idx = rng.choice(m, p=closest / total) if total > 0 else rng.integers(m)
        centroids.append(x[idx])
        closest = np.minimum(closest, _sq_dists(x, x[idx][None])[:, 0])
    return np.array(centroids)


def kmeans(x: np.ndarray, n_clusters: int, seed: int = 0, tol: float = 1e-6,
           max_iter: int = 300) -> KMeansResult:
    """Lloyd iterations from k-means++ seeds.

    Stops when no centroid moves more than ``tol`` or after ``max_iter``
    iterations. An empty cluster is re-seeded at the point farthest from
    its current centroid (ties -> lowest index).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] < n_clusters:
        raise ValueError(f"need at least {n_clusters} points, got {x.shape[0]}")
    rng = np.random.default_rng(seed)
    centroids = kmeans_pp_init(x, n_clusters, rng)
    result = KMeansResult(labels=np.zeros(x.shape[0], dtype=np.int64), centroids=centroids)
    for it in range(1, max_iter + 1):
        dists = _sq_dists(x, centroids)
        labels = dists.argmin(1)
        result.inertia_history.append(float(dists[np.arange(len(x)), labels].sum()))
        new = centroids.copy()
        for c in range(n_clusters):
            members = labels == c
            if members.any():
                new[c] = x[members].mean(0)
            else:
                far = int(dists[np.arange(len(x)), labels].argmax())
                new[c] = x[far]
        shift = np.sqrt(((new - centroids) ** 2).sum(1)).max()
        centroids = new
        result.n_iter = it
        if shift < tol:
            break
    dists = _sq_dists(x, centroids)
    result.labels = dists.argmin(1)
    result.centroids = centroids
    result.inertia_history.append(float(dists[np.arange(len(x)), result.labels].sum()))
    return result


def kmeans_baseline(features: np.ndarray, n_clusters: int, seed: int = 0) -> np.ndarray:
    return kmeans(features, n_clusters, seed).labels
