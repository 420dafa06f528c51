"""Pure-numpy reference implementations of the hot loops.

These are the fallback backend and the semantic reference for the jit
kernels: same signatures, same tie-breaking, same stabilization.
"""

from __future__ import annotations

import numpy as np


def assign_nearest(vectors: np.ndarray, codebook: np.ndarray) -> np.ndarray:
    """Index of the closest codebook row per vector; ties pick the lowest index."""
    diff = vectors[:, None, :] - codebook[None, :, :]
    dist = np.einsum("nkd,nkd->nk", diff, diff)
    return np.argmin(dist, axis=1).astype(np.int64)


def assign_nearest_weighted(
    vectors: np.ndarray, weights: np.ndarray, codebook: np.ndarray
) -> np.ndarray:
    """Weighted nearest-row assignment: distances scaled per dimension."""
    diff = vectors[:, None, :] - codebook[None, :, :]
    dist = np.einsum("nd,nkd,nkd->nk", weights, diff, diff)
    return np.argmin(dist, axis=1).astype(np.int64)


def accumulate_clusters(
    vectors: np.ndarray, indices: np.ndarray, n_clusters: int
) -> tuple[np.ndarray, np.ndarray]:
    """Per-cluster coordinate sums and member counts."""
    d = vectors.shape[1]
    sums = np.zeros((n_clusters, d), dtype=np.float64)
    np.add.at(sums, indices, vectors)
    counts = np.bincount(indices, minlength=n_clusters).astype(np.int64)
    return sums, counts


def accumulate_clusters_weighted(
    vectors: np.ndarray, weights: np.ndarray, indices: np.ndarray, n_clusters: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Weighted and raw per-cluster sums, weight totals, and member counts."""
    d = vectors.shape[1]
    wv_sums = np.zeros((n_clusters, d), dtype=np.float64)
    w_sums = np.zeros((n_clusters, d), dtype=np.float64)
    v_sums = np.zeros((n_clusters, d), dtype=np.float64)
    np.add.at(wv_sums, indices, weights * vectors)
    np.add.at(w_sums, indices, weights)
    np.add.at(v_sums, indices, vectors)
    counts = np.bincount(indices, minlength=n_clusters).astype(np.int64)
    return wv_sums, w_sums, v_sums, counts


def wkv_sequence(
    k: np.ndarray, v: np.ndarray, w: np.ndarray, u: np.ndarray
) -> np.ndarray:
    """Cross-token recurrence with running max-exponent stabilization.

    Step t mixes the decayed history with the current token boosted by u;
    the running peak exponent pp keeps every exp argument nonpositive.
    """
    T, D = k.shape
    out = np.empty((T, D), dtype=np.float64)
    aa = np.zeros(D, dtype=np.float64)
    bb = np.zeros(D, dtype=np.float64)
    pp = np.full(D, -np.inf, dtype=np.float64)
    for t in range(T):
        ww = u + k[t]
        p = np.maximum(pp, ww)
        e1 = np.exp(pp - p)
        e2 = np.exp(ww - p)
        out[t] = (e1 * aa + e2 * v[t]) / (e1 * bb + e2)
        ww = pp - w
        p = np.maximum(ww, k[t])
        e1 = np.exp(ww - p)
        e2 = np.exp(k[t] - p)
        aa = e1 * aa + e2 * v[t]
        bb = e1 * bb + e2
        pp = p
    return out
