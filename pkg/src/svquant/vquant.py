"""Vector quantization with plain, activation-weighted, and compensated paths.

Weights are flattened row-major into d-length vectors and matched
against a per-tensor codebook built by seeded k-means. For weights that
multiply activations elementwise, the codebook minimizes an
activation-weighted loss: each coordinate's squared error counts in
proportion to the mean squared (percentile-clipped) activation it will
be multiplied by.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import kernels
from .errors import ConfigError, DataError, ShapeError, ValidationError
from .squant import CalibrationSet, _damped_inverse_hessian
from .tensor_store import WeightTensor


@dataclass
class Codebook:
    """2^k representative d-vectors."""

    entries: np.ndarray
    k: int
    d: int

    def validate(self) -> None:
        if self.entries.shape != (1 << self.k, self.d):
            raise ValidationError(
                f"codebook shape {self.entries.shape} does not match (2^{self.k}, {self.d})"
            )
        if not np.isfinite(self.entries).all():
            raise ValidationError("codebook entries must be finite")


@dataclass
class VQTensor:
    """Codebook indices for the reshaped weight plus the unpad recipe."""

    name: str
    indices: np.ndarray
    codebook: Codebook
    shape: tuple[int, ...]
    pad: int

    def validate(self) -> None:
        self.codebook.validate()
        if self.indices.min(initial=0) < 0 or self.indices.max(initial=-1) >= (
            1 << self.codebook.k
        ):
            raise ValidationError("index out of codebook range")
        count = 1
        for s in self.shape:
            count *= s
        if self.indices.size != -(-count // self.codebook.d):
            raise ValidationError("index count does not cover the reshaped weight")


@dataclass
class ActivationSummary:
    """Per-position mean squared clipped activation, in the weight's shape."""

    weights: np.ndarray
    clip_lo: float
    clip_hi: float
    count: int

    def validate(self) -> None:
        if (self.weights < 0).any() or not np.isfinite(self.weights).all():
            raise ValidationError("activation summary weights must be finite and >= 0")


def derive_seed(global_seed: int, name: str) -> int:
    """Stable per-tensor seed so parallel and serial runs agree."""
    digest = hashlib.sha256(f"{global_seed}:{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def reshape_vectors(w: WeightTensor | np.ndarray, d: int) -> tuple[np.ndarray, int]:
    """Row-major d-length chunks; the tail repeats the last value, pad returned."""
    if d < 1:
        raise ConfigError(f"vector dim must be >= 1, got {d}")
    data = w.data if isinstance(w, WeightTensor) else np.asarray(w)
    flat = np.asarray(data, dtype=np.float64).ravel()
    pad = (-flat.size) % d
    if pad:
        flat = np.concatenate([flat, np.full(pad, flat[-1])])
    return flat.reshape(-1, d), pad


def unreshape_vectors(mat: np.ndarray, pad: int, shape: tuple[int, ...]) -> np.ndarray:
    flat = mat.ravel()
    if pad:
        flat = flat[:-pad]
    return flat.reshape(shape)


def _pp_init(
    vectors: np.ndarray, n_centroids: int, rng: np.random.Generator,
    weights: np.ndarray | None,
) -> np.ndarray:
    """k-means++ seeding; weighted distances when weights are given."""
    n = vectors.shape[0]
    chosen = np.empty((n_centroids, vectors.shape[1]), dtype=np.float64)
    first = int(rng.integers(n))
    chosen[0] = vectors[first]
    if n_centroids == 1:
        return chosen
    d2 = _sq_dist_to(vectors, chosen[0], weights)
    for i in range(1, n_centroids):
        total = float(d2.sum())
        if total <= 0.0:
            pick = int(rng.integers(n))
        else:
            r = float(rng.random()) * total
            pick = int(np.searchsorted(np.cumsum(d2), r))
            pick = min(pick, n - 1)
        chosen[i] = vectors[pick]
        d2 = np.minimum(d2, _sq_dist_to(vectors, chosen[i], weights))
    return chosen


def _sq_dist_to(
    vectors: np.ndarray, point: np.ndarray, weights: np.ndarray | None
) -> np.ndarray:
    diff = vectors - point
    if weights is None:
        return np.einsum("nd,nd->n", diff, diff)
    return np.einsum("nd,nd->n", weights * diff, diff)


def _objective(
    vectors: np.ndarray, centroids: np.ndarray, idx: np.ndarray,
    weights: np.ndarray | None,
) -> float:
    diff = vectors - centroids[idx]
    if weights is None:
        return float(np.einsum("nd,nd->", diff, diff))
    return float(np.einsum("nd,nd->", weights * diff, diff))


def lloyd_kmeans(
    vectors: np.ndarray,
    n_centroids: int,
    seed: int,
    max_iters: int = 100,
    tol: float = 1e-8,
    weights: np.ndarray | None = None,
) -> tuple[np.ndarray, list[float]]:
    """Seeded k-means returning centroids and the per-iteration objective.

    Empty clusters are reseeded to the point farthest from its current
    centroid. With weights, both assignment and the centroid update use
    the weighted metric; a dimension with zero total weight in a cluster
    falls back to the unweighted mean for that dimension.
    """
    vectors = np.ascontiguousarray(vectors, dtype=np.float64)
    if vectors.ndim != 2 or vectors.shape[0] < 1:
        raise ShapeError("k-means expects a (n, d) vector matrix with n >= 1")
    if not np.isfinite(vectors).all():
        raise DataError("k-means input carries non-finite values")
    if weights is not None:
        weights = np.ascontiguousarray(weights, dtype=np.float64)
        if weights.shape != vectors.shape:
            raise ShapeError("weights must match the vector matrix shape")
        if (weights < 0).any() or not np.isfinite(weights).all():
            raise ConfigError("weights must be finite and >= 0")
        if not weights.any():
            raise ConfigError("weights must not be all zero")

    rng = np.random.default_rng(seed)
    centroids = _pp_init(vectors, n_centroids, rng, weights)
    history: list[float] = []
    for _ in range(max_iters):
        idx = _assign(vectors, centroids, weights)
        history.append(_objective(vectors, centroids, idx, weights))
        new_centroids, empties = _update(vectors, idx, n_centroids, weights, centroids)
        if empties:
            idx2 = _reseed_empties(vectors, new_centroids, idx, empties, weights)
            centroids = new_centroids
            if idx2 is None:
                break
            continue
        shift = float(np.max(np.abs(new_centroids - centroids))) if centroids.size else 0.0
        centroids = new_centroids
        if shift < tol:
            break
    return centroids, history


def _assign(vectors, centroids, weights):
    if weights is None:
        return kernels.assign_nearest(vectors, centroids)
    return kernels.assign_nearest_weighted(vectors, weights, centroids)


def _update(vectors, idx, n_centroids, weights, old_centroids):
    if weights is None:
        sums, counts = kernels.accumulate_clusters(vectors, idx, n_centroids)
        empties = [j for j in range(n_centroids) if counts[j] == 0]
        safe = np.maximum(counts, 1)[:, None].astype(np.float64)
        out = sums / safe
        for j in empties:
            out[j] = old_centroids[j]
        return out, empties
    wv, ws, vs, counts = kernels.accumulate_clusters_weighted(
        vectors, weights, idx, n_centroids
    )
    empties = [j for j in range(n_centroids) if counts[j] == 0]
    out = np.empty_like(wv)
    for j in range(n_centroids):
        if counts[j] == 0:
            out[j] = old_centroids[j]
            continue
        for c in range(vectors.shape[1]):
            if ws[j, c] > 0.0:
                out[j, c] = wv[j, c] / ws[j, c]
            else:
                out[j, c] = vs[j, c] / counts[j]
    return out, empties


def _reseed_empties(vectors, centroids, idx, empties, weights):
    """Move each empty centroid onto the point farthest from its own centroid."""
    diff = vectors - centroids[idx]
    if weights is None:
        dists = np.einsum("nd,nd->n", diff, diff)
    else:
        dists = np.einsum("nd,nd->n", weights * diff, diff)
    moved = False
    for j in empties:
        pick = int(np.argmax(dists))
        if dists[pick] <= 0.0:
            continue
        centroids[j] = vectors[pick]
        dists[pick] = 0.0
        moved = True
    return True if moved else None


def kmeans_codebook(
    vectors: np.ndarray,
    k: int,
    seed: int,
    max_iters: int = 100,
    tol: float = 1e-8,
) -> Codebook:
    """Unweighted codebook with 2^k entries."""
    if k < 0:
        raise ConfigError(f"index bits must be >= 0, got {k}")
    centroids, _ = lloyd_kmeans(vectors, 1 << k, seed, max_iters, tol)
    return Codebook(centroids, k, vectors.shape[1])


def weighted_codebook(
    vectors: np.ndarray,
    weights: np.ndarray,
    k: int,
    seed: int,
    max_iters: int = 100,
    tol: float = 1e-8,
) -> Codebook:
    """Codebook minimizing the per-coordinate weighted squared error."""
    if k < 0:
        raise ConfigError(f"index bits must be >= 0, got {k}")
    centroids, _ = lloyd_kmeans(vectors, 1 << k, seed, max_iters, tol, weights=weights)
    return Codebook(centroids, k, vectors.shape[1])


def vq_assign(vectors: np.ndarray, codebook: Codebook) -> np.ndarray:
    """Exact nearest-codeword indices; ties resolve to the lowest index."""
    if vectors.shape[1] != codebook.d:
        raise ShapeError("vector dim does not match codebook dim")
    return kernels.assign_nearest(
        np.ascontiguousarray(vectors, dtype=np.float64),
        np.ascontiguousarray(codebook.entries, dtype=np.float64),
    )


def vq_quantize(
    w: WeightTensor | np.ndarray,
    k: int,
    d: int,
    seed: int,
    max_iters: int = 100,
    tol: float = 1e-8,
) -> VQTensor:
    """Plain VQ: per-tensor unweighted codebook plus nearest assignment."""
    data = w.data if isinstance(w, WeightTensor) else np.asarray(w)
    name = w.name if isinstance(w, WeightTensor) else "w"
    vectors, pad = reshape_vectors(data, d)
    cb = kmeans_codebook(vectors, k, seed, max_iters, tol)
    idx = vq_assign(vectors, cb)
    return VQTensor(name, idx, cb, tuple(data.shape), pad)


def vq_dequantize(t: VQTensor) -> WeightTensor:
    """Gather codewords, drop padding, restore the original shape."""
    mat = t.codebook.entries[t.indices]
    return WeightTensor(
        t.name, unreshape_vectors(mat, t.pad, t.shape).astype(np.float32)
    )


def activation_summary(
    samples: np.ndarray, clip_lo: float, clip_hi: float
) -> ActivationSummary:
    """Mean squared activation per position after global percentile clipping.

    samples: (n_samples, ...) stack of activations, one slice per sample,
    each shaped like the weight they multiply. Percentiles pool every
    value in the stack (linear interpolation), all samples are clamped
    into that range, and the mean of squares is taken per position.
    """
    if clip_lo >= clip_hi:
        raise ConfigError(f"clip_lo must be below clip_hi, got ({clip_lo}, {clip_hi})")
    arr = np.asarray(samples, dtype=np.float64)
    if arr.ndim < 2 or arr.shape[0] < 1:
        raise ShapeError("need a (n_samples, ...) stack with at least one sample")
    if not np.isfinite(arr).all():
        raise DataError("activation samples carry non-finite values")
    lo, hi = np.percentile(arr, [clip_lo, clip_hi], method="linear")
    clipped = np.clip(arr, lo, hi)
    weights = np.mean(clipped * clipped, axis=0)
    return ActivationSummary(weights, float(clip_lo), float(clip_hi), arr.shape[0])


def quantize_elementwise_mul(
    mu: WeightTensor | np.ndarray,
    summary: ActivationSummary,
    k: int,
    d: int,
    seed: int,
    max_iters: int = 100,
    tol: float = 1e-8,
) -> VQTensor:
    """VQ for weights applied by elementwise multiplication.

    Codebook construction and assignment both use the activation-derived
    coordinate weights; padded slots carry zero weight.
    """
    data = mu.data if isinstance(mu, WeightTensor) else np.asarray(mu)
    name = mu.name if isinstance(mu, WeightTensor) else "mu"
    if summary.weights.size != data.size:
        raise ShapeError("activation summary does not match the weight size")
    vectors, pad = reshape_vectors(data, d)
    wflat = np.asarray(summary.weights, dtype=np.float64).ravel()
    if pad:
        wflat = np.concatenate([wflat, np.zeros(pad)])
    wmat = wflat.reshape(-1, d)
    if not wmat.any():
        # no activation signal anywhere: plain geometry is all there is
        cb = kmeans_codebook(vectors, k, seed, max_iters, tol)
        idx = vq_assign(vectors, cb)
    else:
        cb = weighted_codebook(vectors, wmat, k, seed, max_iters, tol)
        idx = kernels.assign_nearest_weighted(vectors, wmat, cb.entries)
    return VQTensor(name, idx, cb, tuple(data.shape), pad)


def weighted_recon_loss(
    mu: WeightTensor | np.ndarray, summary: ActivationSummary, t: VQTensor
) -> float:
    """Sum of activation-weighted squared reconstruction errors."""
    data = mu.data if isinstance(mu, WeightTensor) else np.asarray(mu)
    recon = vq_dequantize(t).data.astype(np.float64)
    diff = np.asarray(data, dtype=np.float64) - recon
    return float(np.sum(np.asarray(summary.weights, dtype=np.float64) * diff * diff))


def vq_compensated(
    w: WeightTensor | np.ndarray,
    calib: CalibrationSet,
    k: int,
    d: int,
    group_cols: int,
    seed: int,
    lam_frac: float = 0.01,
    max_iters: int = 100,
    tol: float = 1e-8,
) -> VQTensor:
    """Group-wise VQ with inverse-Hessian error propagation.

    The codebook comes from the original weights; column groups are
    assigned left to right and each group's reconstruction error is
    folded into the unprocessed columns. With a Hessian proportional to
    the identity this matches plain VQ exactly.
    """
    data = w.data if isinstance(w, WeightTensor) else np.asarray(w)
    name = w.name if isinstance(w, WeightTensor) else "w"
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError("compensated VQ expects a 2-D weight")
    rows, cols = arr.shape
    if group_cols < 1 or group_cols % d:
        raise ConfigError(f"group_cols must be a positive multiple of d, got {group_cols}")
    if cols % d:
        raise ShapeError(f"weight columns ({cols}) must be a multiple of d ({d})")
    if calib.features != cols:
        raise ShapeError(
            f"calibration features ({calib.features}) do not match weight columns ({cols})"
        )

    vectors, _ = reshape_vectors(arr, d)
    cb = kmeans_codebook(vectors, k, seed, max_iters, tol)

    hinv = _damped_inverse_hessian(calib.samples, lam_frac)
    per_row = cols // d
    cur = arr.copy()
    indices = np.empty(rows * per_row, dtype=np.int64)
    for start in range(0, cols, group_cols):
        stop = min(start + group_cols, cols)
        block = cur[:, start:stop]
        vecs = block.reshape(rows, (stop - start) // d, d).reshape(-1, d)
        idx = vq_assign(vecs, cb)
        recon = cb.entries[idx].reshape(rows, stop - start)
        # scatter block-local vector order back into whole-tensor order
        local = idx.reshape(rows, (stop - start) // d)
        for r in range(rows):
            indices[r * per_row + start // d : r * per_row + stop // d] = local[r]
        if stop < cols:
            err = block - recon
            b = slice(start, stop)
            rest = slice(stop, cols)
            prop = np.linalg.solve(hinv[b, b], hinv[b, rest])
            cur[:, rest] -= err @ prop
        cur[:, start:stop] = recon
    return VQTensor(name, indices, cb, tuple(arr.shape), 0)


def vq_bpw(t: VQTensor, codebook_entry_bits: int = 16) -> Fraction:
    """Index bits per weight plus the amortized codebook."""
    count = 1
    for s in t.shape:
        count *= s
    cb = t.codebook
    return Fraction(cb.k, cb.d) + Fraction((1 << cb.k) * cb.d * codebook_entry_bits, count)


def vq_reconstruction_mse(w: WeightTensor | np.ndarray, t: VQTensor) -> float:
    data = w.data if isinstance(w, WeightTensor) else np.asarray(w)
    diff = np.asarray(data, dtype=np.float64) - vq_dequantize(t).data.astype(np.float64)
    return float(np.mean(diff * diff))


def relative_cluster_loss(w: WeightTensor | np.ndarray, n_clusters: int, seed: int) -> float:
    """Percent of value variance left unexplained by scalar k-means."""
    if n_clusters < 1:
        raise ConfigError(f"n_clusters must be >= 1, got {n_clusters}")
    data = w.data if isinstance(w, WeightTensor) else np.asarray(w)
    flat = np.asarray(data, dtype=np.float64).ravel()
    centered = flat - flat.mean()
    tss = float(centered @ centered)
    if tss == 0.0:
        return 0.0
    if n_clusters == 1:
        # single cluster has the closed-form optimum: centroid = mean
        return 100.0
    vectors = flat[:, None]
    centroids, _ = lloyd_kmeans(vectors, n_clusters, seed)
    idx = kernels.assign_nearest(vectors, centroids)
    diff = vectors - centroids[idx]
    sse = float(np.einsum("nd,nd->", diff, diff))
    return 100.0 * sse / tss
