"""Method-selection proxies and quota-driven threshold calibration.

A tensor's sorted-interval distribution feeds two scores: the coarse
score is the entropy gap of the normalized intervals (how far the
weight values are from globally uniform spacing), and the fine score
sums magnitudes of high-order central moments of the same distribution
(how strongly a few intervals deviate locally). Scalar quantization is
chosen only when both scores fall below their thresholds; thresholds
are either fixed or calibrated to hit a target SQ fraction.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction

import numpy as np

from .errors import ConfigError, ShapeError, ValidationError
from .tensor_store import ModelBundle, QuantConfig, WeightTensor

# Nominal settings-level bpw used for plan predictions, as exact rationals.
SQ_BPW_SETTING = Fraction(13, 4)
VQ_BPW_SETTING = Fraction(7, 2)


class Method(str, Enum):
    SQ = "sq"
    VQ = "vq"


@dataclass
class IntervalDistribution:
    """Normalized ascending-interval distribution of a flattened tensor."""

    probs: np.ndarray
    n: int
    degenerate: bool

    def validate(self) -> None:
        if self.degenerate:
            if self.probs.size:
                raise ValidationError("degenerate distribution must have empty probs")
            return
        if self.probs.size != self.n:
            raise ValidationError("probs length must equal n")
        if (self.probs < 0).any():
            raise ValidationError("interval probabilities must be nonnegative")
        if abs(float(self.probs.sum()) - 1.0) > 1e-12:
            raise ValidationError("interval probabilities must sum to 1")


@dataclass
class ProxyScores:
    """Coarse/fine scores for one tensor."""

    name: str
    pc: float
    pf: float
    moments: list[float]
    n: int


@dataclass
class PlanEntry:
    name: str
    pc: float
    pf: float
    method: Method
    predicted_bpw: Fraction
    size: int


@dataclass
class QuantPlan:
    """Per-tensor method assignment plus the thresholds that produced it."""

    entries: list[PlanEntry]
    tau_c: float
    tau_f: float
    sq_fraction: float
    avg_bpw: Fraction

    def method_for(self, name: str) -> Method:
        for e in self.entries:
            if e.name == name:
                return e.method
        raise ValidationError(f"no plan entry for tensor {name!r}")


def intervals(w: WeightTensor | np.ndarray) -> IntervalDistribution:
    """Sorted-interval distribution of the flattened values."""
    data = w.data if isinstance(w, WeightTensor) else np.asarray(w)
    flat = np.asarray(data, dtype=np.float64).ravel()
    if flat.size < 2:
        raise ShapeError("interval distribution needs at least 2 elements")
    srt = np.sort(flat)
    gaps = np.diff(srt)
    n = gaps.size
    total = float(gaps.sum())
    if total == 0.0:
        return IntervalDistribution(np.empty(0, dtype=np.float64), n, True)
    return IntervalDistribution(gaps / total, n, False)


def coarse_proxy(dist: IntervalDistribution) -> float:
    """Entropy gap ln(n) - H of the interval distribution; 0 when degenerate."""
    if dist.degenerate:
        return 0.0
    p = dist.probs
    nz = p[p > 0.0]
    entropy = -float(np.sum(nz * np.log(nz)))
    return max(0.0, math.log(dist.n) - entropy)


def _eps_moments(dist: IntervalDistribution, order: int) -> list[float]:
    """mean((n*G' - 1)^k) for k = 2..order."""
    eps = dist.n * dist.probs - 1.0
    out = []
    power = eps.copy()
    for _ in range(2, order + 1):
        power = power * eps
        out.append(float(power.mean()))
    return out


def fine_proxy(dist: IntervalDistribution, order: int = 4) -> tuple[float, list[float]]:
    """Sum of scaled central-moment magnitudes, with the per-order terms.

    Works on eps = n*G' - 1 so no n^k factor is ever materialized; the
    k-th term |mean(eps^k)| / (k(k-1)) equals the k-th scaled central
    moment of the interval distribution exactly.
    """
    if order < 2:
        raise ConfigError(f"moment order must be >= 2, got {order}")
    if dist.degenerate:
        return 0.0, [0.0] * (order - 1)
    raw = _eps_moments(dist, order)
    terms = [abs(m) / (k * (k - 1)) for k, m in zip(range(2, order + 1), raw)]
    return float(sum(terms)), [abs(m) for m in raw]


def taylor_coarse_approx(dist: IntervalDistribution, order: int = 4) -> float:
    """Signed truncated expansion of the coarse score around uniformity.

    Cross-check only: for small deviations this approximates
    coarse_proxy, with accuracy improving in the order.
    """
    if order < 2:
        raise ConfigError(f"moment order must be >= 2, got {order}")
    if dist.degenerate:
        return 0.0
    raw = _eps_moments(dist, order)
    return float(
        sum(((-1) ** k) * m / (k * (k - 1)) for k, m in zip(range(2, order + 1), raw))
    )


def score_tensor(w: WeightTensor, order: int = 4) -> ProxyScores:
    dist = intervals(w)
    pc = coarse_proxy(dist)
    pf, moments = fine_proxy(dist, order)
    return ProxyScores(w.name, pc, pf, moments, dist.n)


def select_method(pc: float, pf: float, tau_c: float, tau_f: float) -> Method:
    """SQ only when the coarse gate passes and then the fine gate passes."""
    if pc < tau_c:
        return Method.SQ if pf < tau_f else Method.VQ
    return Method.VQ


def _achievable_counts(values: list[float]) -> list[int]:
    """Pass counts reachable by a strict threshold over sorted values."""
    n = len(values)
    counts = []
    for c in range(n + 1):
        # c == 0: threshold at the smallest value passes nothing (strict <)
        if c == n or c == 0 or values[c - 1] < values[c]:
            counts.append(c)
    return counts


def calibrate_thresholds(scores: list[ProxyScores], rho: float) -> tuple[float, float]:
    """Pick (tau_c, tau_f) so the SQ count hits round(rho * len(scores)).

    The coarse gate is seeded at the sqrt(rho) split so both gates
    filter; among coarse pass-counts that can still reach the target,
    the one closest to the seed (ties toward more passers) whose fine
    gate can hit the target exactly wins. When no exact split exists
    (tied scores), the closest achievable count is used and the caller
    reports the achieved fraction.
    """
    if not 0.0 < rho < 1.0:
        raise ConfigError(f"sq_fraction must lie strictly inside (0, 1), got {rho}")
    if len(scores) < 2:
        raise ValidationError("calibration needs at least 2 tensors")

    cnt = len(scores)
    target = round(rho * cnt)
    by_pc = sorted(scores, key=lambda s: (s.pc, s.name))
    pcs = [s.pc for s in by_pc]
    seed_count = max(target, math.ceil(math.sqrt(rho) * cnt) - 1)

    def tau_c_for(c: int) -> float:
        return pcs[-1] + 1.0 if c == cnt else pcs[c]

    candidates = [c for c in _achievable_counts(pcs) if c >= target]
    candidates.sort(key=lambda c: (abs(c - seed_count), -c))

    for c in candidates:
        pfs = sorted(s.pf for s in by_pc[:c])
        if target == c:
            tau_f = (pfs[-1] + 1.0) if pfs else 1.0
            return tau_c_for(c), tau_f
        if pfs[target - 1] < pfs[target]:
            return tau_c_for(c), pfs[target]

    # No threshold pair hits the target exactly; get as close as possible,
    # preferring more SQ, then the coarse count nearest the seed.
    best = None
    for c in candidates:
        pfs = sorted(s.pf for s in by_pc[:c])
        for f in _achievable_counts(pfs):
            tau_f = (pfs[-1] + 1.0 if pfs else 1.0) if f == len(pfs) else pfs[f]
            key = (abs(f - target), -f, abs(c - seed_count), -c)
            if best is None or key < best[0]:
                best = (key, tau_c_for(c), tau_f)
    assert best is not None
    return best[1], best[2]


def plan(
    bundle: ModelBundle,
    config: QuantConfig,
    sq_bpw_setting: Fraction = SQ_BPW_SETTING,
    vq_bpw_setting: Fraction = VQ_BPW_SETTING,
) -> QuantPlan:
    """Score, calibrate if asked, and assign a method per tensor.

    Tensors named in the bundle's "quantize" metadata whitelist are
    planned; without a whitelist every tensor is. Predicted bpw uses the
    nominal settings-level numbers so plan-time reporting is exact
    rational arithmetic.
    """
    config.validate()
    names = quantizable_names(bundle)
    scores = [score_tensor(bundle.tensor(n), config.taylor_order) for n in names]

    if config.tau_c == "auto" or config.tau_f == "auto":
        if len(scores) >= 2:
            tau_c, tau_f = calibrate_thresholds(scores, config.sq_fraction)
        else:
            # A single tensor cannot be split; pass it through the SQ gate.
            tau_c, tau_f = (
                (scores[0].pc + 1.0, scores[0].pf + 1.0) if scores else (1.0, 1.0)
            )
        if config.tau_c != "auto":
            tau_c = float(config.tau_c)
        if config.tau_f != "auto":
            tau_f = float(config.tau_f)
    else:
        tau_c, tau_f = float(config.tau_c), float(config.tau_f)

    entries = []
    sq_count = 0
    total_bits = Fraction(0)
    total_size = 0
    for s in scores:
        method = select_method(s.pc, s.pf, tau_c, tau_f)
        bpw = sq_bpw_setting if method is Method.SQ else vq_bpw_setting
        size = int(np.prod(bundle.tensor(s.name).shape))
        entries.append(PlanEntry(s.name, s.pc, s.pf, method, bpw, size))
        sq_count += method is Method.SQ
        total_bits += bpw * size
        total_size += size
    avg = total_bits / total_size if total_size else Fraction(0)
    fraction = sq_count / len(entries) if entries else 0.0
    return QuantPlan(entries, tau_c, tau_f, fraction, avg)


def quantizable_names(bundle: ModelBundle) -> list[str]:
    """Names eligible for quantization, honoring the metadata whitelist."""
    raw = bundle.metadata.get("quantize")
    if raw is None:
        return bundle.names()
    listed = json.loads(raw)
    if not isinstance(listed, list) or not all(isinstance(x, str) for x in listed):
        raise ValidationError("quantize metadata must be a JSON list of names")
    have = set(bundle.names())
    missing = [x for x in listed if x not in have]
    if missing:
        raise ValidationError(f"quantize list names unknown tensors: {missing}")
    return listed


def exhaustive_plan(bundle, inputs, config=None) -> QuantPlan:
    """Globally optimal assignment by trying every combination.

    Cost doubles per quantizable tensor, so this is capped at desk
    scale; it exists as the reference the threshold planner is judged
    against.
    """
    from . import rwkv_sim

    return rwkv_sim.exhaustive_plan(bundle, inputs, config)
