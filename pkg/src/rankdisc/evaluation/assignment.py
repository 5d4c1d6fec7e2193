"""Optimal assignment and clustering accuracy."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def _solve(cost):
    """Shortest-augmenting-path Hungarian method on a square list-of-lists.

    Returns ``(assignment, u, v)`` with ``assignment[row] = col`` and the
    optimal row/column potentials.
    """
    n = len(cost)
    inf = float("inf")
    u = [0.0] * (n + 1)
    v = [0.0] * (n + 1)
    match_col = [0] * (n + 1)  # match_col[j] = row matched to column j (1-based)
    way = [0] * (n + 1)
    for i in range(1, n + 1):
        match_col[0] = i
        j0 = 0
        minv = [inf] * (n + 1)
        used = [False] * (n + 1)
        while True:
            used[j0] = True
            i0 = match_col[j0]
            delta, j1 = inf, 0
            row = cost[i0 - 1]
            for j in range(1, n + 1):
                if not used[j]:
                    cur = row[j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta, j1 = minv[j], j
            for j in range(n + 1):
                if used[j]:
                    u[match_col[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if match_col[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match_col[j0] = match_col[j1]
            j0 = j1
    assignment = [0] * n
    for j in range(1, n + 1):
        assignment[match_col[j] - 1] = j - 1
    return assignment, u[1:], v[1:]


def _perfect_matching_exists(adj, rows, cols):
    """Kuhn's algorithm restricted to the given row and column sets."""
    owner = {}

    def augment(r, seen):
        for c in adj[r]:
            if c in cols and c not in seen:
                seen.add(c)
                if c not in owner or augment(owner[c], seen):
                    owner[c] = r
                    return True
        return False

    return all(augment(r, set()) for r in rows)


def hungarian(cost) -> np.ndarray:
    """Permutation ``perm`` (row -> column) minimising ``sum(cost[i, perm[i]])``.

    Among all optimal permutations the lexicographically smallest is
    returned. With optimal potentials fixed, a permutation is optimal iff
    it only uses tight edges, so the choice is a greedy search over perfect
    matchings of the tight-edge graph.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ValueError(f"cost matrix must be square, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix must be finite")
    n = cost.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    # shift to nonnegative for better-conditioned potentials
    shifted = cost - cost.min()
    _, u, v = _solve(shifted.tolist())
    tol = 1e-9 * max(1.0, float(np.abs(shifted).max()))
    slack = shifted - np.asarray(u)[:, None] - np.asarray(v)[None, :]
    adj = [[j for j in range(n) if slack[i, j] <= tol] for i in range(n)]

    perm = np.empty(n, dtype=np.int64)
    free_cols = set(range(n))
    for i in range(n):
        rest = range(i + 1, n)
        for j in adj[i]:
            if j in free_cols and _perfect_matching_exists(adj, rest, free_cols - {j}):
                perm[i] = j
                free_cols.discard(j)
                break
        else:  # pragma: no cover - unreachable with exact potentials
            raise ArithmeticError("no optimal completion found; cost matrix ill-conditioned")
    return perm


@dataclass(frozen=True)
class AssignmentResult:
    permutation: np.ndarray  # cluster index -> class index
    matched_count: int
    total: int

    @property
    def acc(self) -> float:
        return self.matched_count / self.total if self.total else 0.0


def contingency(pred, truth, n: int) -> np.ndarray:
    counts = np.zeros((n, n), dtype=np.int64)
    np.add.at(counts, (pred, truth), 1)
    return counts


def _check_indices(name, values, n):
    values = np.asarray(values, dtype=np.int64)
    if values.size and (values.min() < 0 or values.max() >= n):
        raise ValueError(f"{name} indices must lie in [0, {n})")
    return values


def clustering_acc(pred, truth, n_clusters: int) -> AssignmentResult:
    """Best-bijection accuracy between cluster ids and class ids."""
    pred = _check_indices("pred", pred, n_clusters)
    truth = _check_indices("truth", truth, n_clusters)
    if pred.shape != truth.shape:
        raise ValueError(f"pred and truth lengths differ: {pred.shape} vs {truth.shape}")
    counts = contingency(pred, truth, n_clusters)
    perm = hungarian(-counts)
    matched = int(counts[np.arange(n_clusters), perm].sum())
    return AssignmentResult(perm, matched, int(pred.size))
