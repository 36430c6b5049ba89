"""Seeded k-means shared by the quantizer and the token-selection strategies.

k-means++ initialization, Lloyd iterations capped at 100, convergence when
assignments stop changing, and empty clusters reseeded to the point farthest
from its assigned centroid. Everything is deterministic for a fixed seed.
"""

from __future__ import annotations

import numpy as np

MAX_ITERS = 100


def _pairwise_sq_dists(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    # (n, k) table of squared Euclidean distances.
    p2 = np.einsum("ij,ij->i", points, points)[:, None]
    c2 = np.einsum("ij,ij->i", centers, centers)[None, :]
    d2 = p2 + c2 - 2.0 * points @ centers.T
    np.maximum(d2, 0.0, out=d2)
    return d2


def _kmeans_pp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = rng.integers(n)
    d2 = _pairwise_sq_dists(points, points[chosen[:1]])[:, 0]
    for i in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = rng.choice(n, p=d2 / total)
        else:
            # All remaining points coincide with a chosen center.
            idx = rng.integers(n)
        chosen[i] = idx
        d2 = np.minimum(d2, _pairwise_sq_dists(points, points[idx : idx + 1])[:, 0])
    return points[chosen].astype(np.float64, copy=True)


def kmeans(points: np.ndarray, k: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Cluster points (n, d) into k groups.

    Returns (centroids (k, d) float32, assignments (n,) int64). Requires
    k <= n; callers enforce their own preconditions.
    """
    points = np.asarray(points, dtype=np.float64)
    n, _ = points.shape
    if not 1 <= k <= n:
        raise ValueError(f"k={k} outside [1, {n}]")
    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp_init(points, k, rng)
    assign = np.argmin(_pairwise_sq_dists(points, centroids), axis=1)

    for _ in range(MAX_ITERS):
        counts = np.bincount(assign, minlength=k)
        sums = np.zeros_like(centroids)
        np.add.at(sums, assign, points)
        nonempty = counts > 0
        centroids[nonempty] = sums[nonempty] / counts[nonempty, None]

        empty = np.flatnonzero(~nonempty)
        if empty.size:
            # Move each empty centroid onto the point currently farthest from
            # its assigned centroid, one point per empty cluster.
            d_own = np.einsum(
                "ij,ij->i", points - centroids[assign], points - centroids[assign]
            )
            for c in empty:
                far = int(np.argmax(d_own))
                centroids[c] = points[far]
                d_own[far] = -np.inf

        new_assign = np.argmin(_pairwise_sq_dists(points, centroids), axis=1)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign

    return centroids.astype(np.float32), assign
