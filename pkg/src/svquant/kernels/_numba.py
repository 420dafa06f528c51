"""Jit-compiled hot loops. Mirrors _numpy exactly; see that module for semantics."""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def assign_nearest(vectors, codebook):
    n, d = vectors.shape
    m = codebook.shape[0]
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        best = 0
        best_dist = np.inf
        for j in range(m):
            dist = 0.0
            for c in range(d):
                diff = vectors[i, c] - codebook[j, c]
                dist += diff * diff
            if dist < best_dist:
                best_dist = dist
                best = j
        out[i] = best
    return out


@njit(cache=True)
def assign_nearest_weighted(vectors, weights, codebook):
    n, d = vectors.shape
    m = codebook.shape[0]
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        best = 0
        best_dist = np.inf
        for j in range(m):
            dist = 0.0
            for c in range(d):
                diff = vectors[i, c] - codebook[j, c]
                dist += weights[i, c] * diff * diff
            if dist < best_dist:
                best_dist = dist
                best = j
        out[i] = best
    return out


@njit(cache=True)
def accumulate_clusters(vectors, indices, n_clusters):
    n, d = vectors.shape
    sums = np.zeros((n_clusters, d), dtype=np.float64)
    counts = np.zeros(n_clusters, dtype=np.int64)
    for i in range(n):
        j = indices[i]
        counts[j] += 1
        for c in range(d):
            sums[j, c] += vectors[i, c]
    return sums, counts


@njit(cache=True)
def accumulate_clusters_weighted(vectors, weights, indices, n_clusters):
    n, d = vectors.shape
    wv_sums = np.zeros((n_clusters, d), dtype=np.float64)
    w_sums = np.zeros((n_clusters, d), dtype=np.float64)
    v_sums = np.zeros((n_clusters, d), dtype=np.float64)
    counts = np.zeros(n_clusters, dtype=np.int64)
    for i in range(n):
        j = indices[i]
        counts[j] += 1
        for c in range(d):
            wv_sums[j, c] += weights[i, c] * vectors[i, c]
            w_sums[j, c] += weights[i, c]
            v_sums[j, c] += vectors[i, c]
    return wv_sums, w_sums, v_sums, counts


@njit(cache=True)
def wkv_sequence(k, v, w, u):
    T, D = k.shape
    out = np.empty((T, D), dtype=np.float64)
    aa = np.zeros(D, dtype=np.float64)
    bb = np.zeros(D, dtype=np.float64)
    pp = np.full(D, -np.inf, dtype=np.float64)
    for t in range(T):
        for c in range(D):
            ww = u[c] + k[t, c]
            p = max(pp[c], ww)
            e1 = np.exp(pp[c] - p)
            e2 = np.exp(ww - p)
            out[t, c] = (e1 * aa[c] + e2 * v[t, c]) / (e1 * bb[c] + e2)
            ww = pp[c] - w[c]
            p = max(ww, k[t, c])
            e1 = np.exp(ww - p)
            e2 = np.exp(k[t, c] - p)
            aa[c] = e1 * aa[c] + e2 * v[t, c]
            bb[c] = e1 * bb[c] + e2
            pp[c] = p
    return out
