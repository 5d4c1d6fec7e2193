"""Pairwise pseudo-labels from top-k rank statistics of feature vectors."""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class RankStatConfig:
    k: int = 5

    def validate(self, dim: int):
        if not 1 <= self.k <= dim:
            raise ValueError(f"k must be in [1, {dim}], got {self.k}")


def top_k_mask(features: np.ndarray, k: int) -> np.ndarray:
    """Boolean ``(B, d)`` mask of each row's top-k dimensions.

    Ranking is by signed value, largest first. Ties at the cut are broken
    toward the lower index, which a stable sort of the negated values gives.
    """
    features = np.atleast_2d(features)
    d = features.shape[1]
    if not 1 <= k <= d:
        raise ValueError(f"k must be in [1, {d}], got {k}")
    order = np.argsort(-features, axis=1, kind="stable")[:, :k]
    mask = np.zeros(features.shape, dtype=bool)
    np.put_along_axis(mask, order, True, axis=1)
    return mask


def top_k_set(z: np.ndarray, k: int) -> frozenset:
    z = np.asarray(z)
    if z.ndim != 1:
        raise ValueError(f"expected a vector, got shape {z.shape}")
    return frozenset(np.flatnonzero(top_k_mask(z, k)[0]).tolist())


def pair_labels(features: np.ndarray, cfg: RankStatConfig) -> np.ndarray:
    """``s[i, j] = 1`` iff rows i and j share the same top-k index set.

    Two k-subsets are equal exactly when their intersection has k elements,
    so the whole matrix is one integer product of the masks.
    """
    mask = top_k_mask(features, cfg.k).astype(np.int64)
    return (mask @ mask.T == cfg.k).astype(np.int64)
