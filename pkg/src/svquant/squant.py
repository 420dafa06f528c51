"""Group-wise scalar quantization.

Round-to-nearest maps each group of a row onto a (2^b)-level integer
grid with a float16-semantics scale and an integer zero point. The
compensated variant walks columns left to right and folds each column's
quantization error into the not-yet-quantized columns through the
damped inverse Hessian of the calibration activations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import ConfigError, DataError, NumericalError, ShapeError
from .tensor_store import WeightTensor


@dataclass
class CalibrationSet:
    """Activation rows observed by one weight during calibration."""

    samples: np.ndarray

    def __post_init__(self) -> None:
        arr = np.ascontiguousarray(self.samples, dtype=np.float64)
        if arr.ndim != 2:
            raise ShapeError("calibration samples must be a 2-D (samples, features) array")
        if not np.isfinite(arr).all():
            raise DataError("calibration samples carry non-finite values")
        self.samples = arr

    @property
    def count(self) -> int:
        return self.samples.shape[0]

    @property
    def features(self) -> int:
        return self.samples.shape[1]


@dataclass
class SQTensor:
    """Scalar-quantized tensor: integer codes plus per-group grid parameters.

    Codes are kept unpacked (one uint8 per weight) in memory; pack_codes
    produces the b-bit serialized form. Constant groups store their value
    in ``offsets`` with a unit scale so reconstruction is exact.
    """

    name: str
    codes: np.ndarray
    scales: np.ndarray
    zeros: np.ndarray
    offsets: np.ndarray
    bits: int
    group: int
    shape: tuple[int, ...]

    def validate(self) -> None:
        top = (1 << self.bits) - 1
        if self.codes.min(initial=0) < 0 or self.codes.max(initial=0) > top:
            raise ConfigError(f"codes exceed {self.bits}-bit range")
        rows, cols = _as_rows(np.empty(self.shape)).shape
        want_groups = _ceil_div(cols, self.group)
        if self.scales.shape != (rows, want_groups):
            raise ShapeError("per-group scale array has the wrong shape")


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def _as_rows(arr: np.ndarray) -> np.ndarray:
    """View a 1-D or 2-D weight as rows; groups never cross row ends."""
    return arr.reshape(1, -1) if arr.ndim == 1 else arr


def _grid_params(
    group_vals: np.ndarray, bits: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Per-group (scale, zero, offset, constant-mask) from value ranges.

    group_vals has shape (rows, n_groups, g). The scale is rounded
    through float16 before any use so stored and applied scales agree.
    """
    lo = group_vals.min(axis=2)
    hi = group_vals.max(axis=2)
    levels = (1 << bits) - 1
    with np.errstate(over="ignore"):
        scale = ((hi - lo) / levels).astype(np.float16).astype(np.float64)
    # ranges beyond float16 saturate instead of rounding to inf
    scale = np.where(np.isinf(scale), float(np.finfo(np.float16).max), scale)
    const = scale == 0.0
    scale = np.where(const, 1.0, scale)
    zero = np.clip(np.rint(-lo / scale), 0, levels)
    zero = np.where(const, 0.0, zero)
    offset = np.where(const, lo, 0.0)
    return scale, zero, offset, const


def _padded_groups(rows: np.ndarray, g: int) -> np.ndarray:
    """(rows, n_groups, width) view; short tails repeat their last value."""
    r, c = rows.shape
    n_groups = _ceil_div(c, g)
    if n_groups == 1:
        return rows.reshape(r, 1, c)
    pad = n_groups * g - c
    if pad:
        rows = np.concatenate([rows, np.repeat(rows[:, -1:], pad, axis=1)], axis=1)
    return rows.reshape(r, n_groups, g)


def _check_input(w: WeightTensor | np.ndarray, bits: int, group: int) -> np.ndarray:
    if bits < 2:
        raise ConfigError(f"sq bits must be >= 2, got {bits}")
    if bits > 8:
        raise ConfigError(f"sq bits must be <= 8, got {bits}")
    if group < 1:
        raise ConfigError(f"sq group must be >= 1, got {group}")
    data = w.data if isinstance(w, WeightTensor) else np.asarray(w)
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim not in (1, 2):
        raise ShapeError(f"scalar quantization expects 1-D or 2-D weights, got {arr.ndim}-D")
    if not np.isfinite(arr).all():
        raise DataError("weight tensor carries non-finite values")
    return arr


def sq_quantize_rtn(w: WeightTensor | np.ndarray, bits: int, group: int) -> SQTensor:
    """Round-to-nearest grid quantization, half-to-even rounding."""
    arr = _check_input(w, bits, group)
    name = w.name if isinstance(w, WeightTensor) else "w"
    rows = _as_rows(arr)
    grouped = _padded_groups(rows, group)
    scale, zero, offset, const = _grid_params(grouped, bits)
    levels = (1 << bits) - 1
    q = np.clip(np.rint(grouped / scale[:, :, None]) + zero[:, :, None], 0, levels)
    q = np.where(const[:, :, None], 0.0, q)
    codes = q.reshape(rows.shape[0], -1)[:, : rows.shape[1]].astype(np.uint8)
    return SQTensor(
        name=name,
        codes=codes.reshape(arr.shape),
        scales=scale,
        zeros=zero.astype(np.int64),
        offsets=offset,
        bits=bits,
        group=group,
        shape=tuple(arr.shape),
    )


def sq_dequantize(t: SQTensor) -> WeightTensor:
    """Reconstruct (codes - zero) * scale + offset at the original shape."""
    rows = _as_rows(t.codes).astype(np.float64)
    r, c = rows.shape
    gidx = np.arange(c) // t.group
    s = t.scales[:, gidx]
    z = t.zeros[:, gidx].astype(np.float64)
    off = t.offsets[:, gidx]
    out = (rows - z) * s + off
    return WeightTensor(t.name, out.reshape(t.shape).astype(np.float32))


def gptq_quantize(
    w: WeightTensor | np.ndarray,
    calib: CalibrationSet,
    bits: int,
    group: int,
    lam_frac: float = 0.01,
) -> SQTensor:
    """Column-by-column grid quantization with second-order compensation.

    Each column's rounding error is spread onto the remaining columns
    using the running inverse of H = X^T X + lambda*I (Schur downdate),
    so later columns absorb what earlier rounding destroyed. Group grid
    parameters are taken from the compensated values at group entry.
    With H proportional to the identity this reduces to plain RTN.
    """
    if lam_frac <= 0:
        raise ConfigError(f"lam_frac must be positive, got {lam_frac}")
    arr = _check_input(w, bits, group)
    name = w.name if isinstance(w, WeightTensor) else "w"
    rows = _as_rows(arr).copy()
    r, c = rows.shape
    if calib.features != c:
        raise ShapeError(
            f"calibration features ({calib.features}) do not match weight columns ({c})"
        )

    hinv = _damped_inverse_hessian(calib.samples, lam_frac)

    levels = (1 << bits) - 1
    codes = np.empty((r, c), dtype=np.uint8)
    n_groups = _ceil_div(c, group)
    scales = np.empty((r, n_groups), dtype=np.float64)
    zeros = np.empty((r, n_groups), dtype=np.float64)
    offsets = np.empty((r, n_groups), dtype=np.float64)

    for i in range(c):
        gi, rem = divmod(i, group)
        if rem == 0:
            hi = min(i + group, c)
            grouped = _padded_groups(rows[:, i:hi], hi - i)
            s, z, off, _ = _grid_params(grouped, bits)
            scales[:, gi] = s[:, 0]
            zeros[:, gi] = z[:, 0]
            offsets[:, gi] = off[:, 0]
        s = scales[:, gi]
        z = zeros[:, gi]
        off = offsets[:, gi]
        col = rows[:, i]
        q = np.clip(np.rint((col - off) / s) + z, 0, levels)
        codes[:, i] = q.astype(np.uint8)
        dq = (q - z) * s + off
        err = (col - dq) / hinv[0, 0]
        if i + 1 < c:
            rows[:, i + 1 :] -= np.outer(err, hinv[0, 1:])
        hinv = hinv[1:, 1:] - np.outer(hinv[1:, 0], hinv[0, 1:]) / hinv[0, 0]

    return SQTensor(
        name=name,
        codes=codes.reshape(arr.shape),
        scales=scales,
        zeros=zeros.astype(np.int64),
        offsets=offsets,
        bits=bits,
        group=group,
        shape=tuple(arr.shape),
    )


def _damped_inverse_hessian(samples: np.ndarray, lam_frac: float = 0.01) -> np.ndarray:
    with np.errstate(over="ignore", invalid="ignore"):
        h = samples.T @ samples
    diag = np.diag(h)
    diag_mean = float(np.mean(diag)) if np.isfinite(diag).all() else np.inf
    lam = lam_frac * diag_mean if 0 < diag_mean < np.inf else lam_frac
    for _ in range(2):
        try:
            damped = h + lam * np.eye(h.shape[0])
            if not np.isfinite(damped).all():
                raise np.linalg.LinAlgError("non-finite Hessian")
            np.linalg.cholesky(damped)
            inv = np.linalg.inv(damped)
            if not np.isfinite(inv).all():
                raise np.linalg.LinAlgError("non-finite inverse")
            return inv
        except np.linalg.LinAlgError:
            lam *= 10.0
    raise NumericalError("calibration Hessian is not positive definite after damping")


def pack_codes(codes: np.ndarray, bits: int) -> np.ndarray:
    """Pack b-bit codes into a flat byte array, little-endian bit order."""
    if not 1 <= bits <= 8:
        raise ConfigError(f"packing supports 1..8 bits, got {bits}")
    flat = np.ascontiguousarray(codes, dtype=np.uint8).ravel()
    bit_rows = np.unpackbits(flat[:, None], axis=1, bitorder="little", count=bits)
    return np.packbits(bit_rows.ravel(), bitorder="little")


def unpack_codes(packed: np.ndarray, bits: int, count: int) -> np.ndarray:
    """Inverse of pack_codes for the first ``count`` codes."""
    if not 1 <= bits <= 8:
        raise ConfigError(f"packing supports 1..8 bits, got {bits}")
    bits_flat = np.unpackbits(np.asarray(packed, dtype=np.uint8), bitorder="little")
    need = count * bits
    if bits_flat.size < need:
        raise ShapeError("packed buffer too short for requested code count")
    rows = bits_flat[:need].reshape(count, bits)
    return np.packbits(rows, axis=1, bitorder="little")[:, 0]


def sq_bpw(t: SQTensor, scale_bits: int = 16, zero_bits: int = 0) -> Fraction:
    """Average bits per weight: code bits plus amortized grid parameters.

    Zero points are free by default, matching the common reporting
    convention; pass zero_bits explicitly for stricter accounting.
    """
    return Fraction(t.bits) + Fraction(scale_bits + zero_bits, t.group)


def sq_reconstruction_mse(w: WeightTensor | np.ndarray, t: SQTensor) -> float:
    data = w.data if isinstance(w, WeightTensor) else np.asarray(w)
    diff = np.asarray(data, dtype=np.float64) - sq_dequantize(t).data.astype(np.float64)
    return float(np.mean(diff * diff))
