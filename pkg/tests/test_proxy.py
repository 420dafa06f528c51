"""Proxy math: frozen worked examples, literal-form oracles, invariants."""

import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from svquant import ConfigError, ModelBundle, QuantConfig, ShapeError, TensorKind, ValidationError, WeightTensor
from svquant.proxy import (
    IntervalDistribution,
    Method,
    ProxyScores,
    calibrate_thresholds,
    coarse_proxy,
    fine_proxy,
    intervals,
    plan,
    quantizable_names,
    score_tensor,
    select_method,
    taylor_coarse_approx,
)

# Frozen by hand: H([.25,.25,.5]) = 1.5*ln2, Pc = ln3 - 1.5*ln2.
PC_QUARTER_HALF = 0.05889151782819171
# Frozen by hand: 0.125/2 + 0.03125/6 + 0.0234375/12.
PF_QUARTER_HALF = 0.06966145833333333


def dist_of(values) -> IntervalDistribution:
    return intervals(np.asarray(values, dtype=np.float64))


def test_intervals_worked_example():
    d = dist_of([0.0, 1.0, 2.0, 4.0])
    assert d.n == 3
    assert not d.degenerate
    assert np.allclose(d.probs, [0.25, 0.25, 0.5], atol=1e-15)


def test_intervals_degenerate():
    d = dist_of([5.0, 5.0, 5.0])
    assert d.degenerate
    assert d.n == 2
    assert d.probs.size == 0


def test_intervals_arithmetic_progression_uniform():
    d = dist_of(np.arange(100.0))
    assert np.allclose(d.probs, 1.0 / 99.0, atol=1e-15)


def test_intervals_sorts_input():
    assert np.allclose(dist_of([4.0, 0.0, 2.0, 1.0]).probs, [0.25, 0.25, 0.5])


def test_intervals_single_element_rejected():
    with pytest.raises(ShapeError):
        dist_of([1.0])


def test_coarse_uniform_is_zero():
    assert coarse_proxy(dist_of(np.arange(50.0))) == pytest.approx(0.0, abs=1e-12)


def test_coarse_worked_example():
    got = coarse_proxy(dist_of([0.0, 1.0, 2.0, 4.0]))
    assert got == pytest.approx(PC_QUARTER_HALF, abs=1e-12)
    assert got == pytest.approx(0.05889, abs=5e-6)


def test_coarse_single_spike_hits_log_n():
    d = IntervalDistribution(np.array([1.0, 0.0, 0.0]), 3, False)
    assert coarse_proxy(d) == pytest.approx(math.log(3.0), abs=1e-12)


def test_coarse_degenerate_zero():
    assert coarse_proxy(dist_of([7.0, 7.0])) == 0.0


def test_fine_uniform_is_zero():
    pf, moments = fine_proxy(dist_of(np.arange(20.0)), 4)
    assert pf == pytest.approx(0.0, abs=1e-12)
    assert np.allclose(moments, 0.0, atol=1e-12)


def test_fine_worked_example():
    pf, moments = fine_proxy(dist_of([0.0, 1.0, 2.0, 4.0]), 4)
    assert pf == pytest.approx(PF_QUARTER_HALF, abs=1e-12)
    assert moments == pytest.approx([0.125, 0.03125, 0.0234375], abs=1e-12)


def test_fine_matches_literal_moment_form():
    # Oracle: v_k |M_k| with v_k = n^k / (k(k-1)) and M_k the k-th
    # central moment of the normalized intervals around 1/n.
    rng = np.random.default_rng(10)
    for _ in range(50):
        size = int(rng.integers(3, 400))
        vals = rng.normal(size=size)
        d = intervals(vals)
        K = int(rng.integers(2, 7))
        pf, _ = fine_proxy(d, K)
        delta = d.probs - 1.0 / d.n
        literal = sum(
            (float(d.n) ** k) / (k * (k - 1)) * abs(float(np.mean(delta**k)))
            for k in range(2, K + 1)
        )
        assert pf == pytest.approx(literal, rel=1e-9, abs=1e-12)


def test_fine_order_below_two_rejected():
    with pytest.raises(ConfigError):
        fine_proxy(dist_of([0.0, 1.0]), 1)


def test_fine_degenerate_zero():
    pf, moments = fine_proxy(dist_of([3.0, 3.0, 3.0]), 5)
    assert pf == 0.0
    assert moments == [0.0] * 4


def test_outlier_interval_strictly_increases_fine():
    rng = np.random.default_rng(11)
    for _ in range(100):
        base = rng.uniform(0.9, 1.1, size=int(rng.integers(8, 100)))
        probs = base / base.sum()
        d0 = IntervalDistribution(probs, probs.size, False)
        pf0, _ = fine_proxy(d0, 4)
        grown = np.append(base, 50.0 * base.max())
        probs1 = grown / grown.sum()
        d1 = IntervalDistribution(probs1, probs1.size, False)
        pf1, _ = fine_proxy(d1, 4)
        assert pf1 > pf0


def test_taylor_uniform_zero():
    assert taylor_coarse_approx(dist_of(np.arange(30.0)), 4) == pytest.approx(0.0, abs=1e-12)


def test_taylor_worked_example_k2():
    got = taylor_coarse_approx(dist_of([0.0, 1.0, 2.0, 4.0]), 2)
    assert got == pytest.approx(0.0625, abs=1e-12)


def test_taylor_approaches_coarse_for_small_deviations():
    rng = np.random.default_rng(12)
    wins = 0
    trials = 200
    for _ in range(trials):
        n = int(rng.integers(16, 256))
        eps = rng.uniform(-0.08, 0.08, size=n)
        eps -= eps.mean()
        probs = (1.0 + eps) / n
        d = IntervalDistribution(probs / probs.sum(), n, False)
        exact = coarse_proxy(d)
        errs = [abs(taylor_coarse_approx(d, K) - exact) for K in (2, 4, 6, 8)]
        wins += all(a >= b for a, b in zip(errs, errs[1:]))
    assert wins >= 0.95 * trials


def test_select_method_rule():
    assert select_method(0.1, 1.0, 1.54, 30.0) is Method.SQ
    assert select_method(2.0, 0.0, 1.54, 30.0) is Method.VQ
    assert select_method(0.1, 50.0, 1.54, 30.0) is Method.VQ


def test_select_method_boundary_is_strict():
    assert select_method(1.5, 0.0, 1.5, 50.0) is Method.VQ
    assert select_method(0.0, 50.0, 1.5, 50.0) is Method.VQ


def scores_from(pcs, pfs=None):
    pfs = pfs if pfs is not None else [0.0] * len(pcs)
    return [
        ProxyScores(f"t{i:02d}", pc, pf, [], 100)
        for i, (pc, pf) in enumerate(zip(pcs, pfs))
    ]


def count_sq(scores, tau_c, tau_f):
    return sum(select_method(s.pc, s.pf, tau_c, tau_f) is Method.SQ for s in scores)


def test_calibrate_nine_tenths_quota():
    rng = np.random.default_rng(13)
    for _ in range(20):
        scores = scores_from(rng.uniform(0, 3, 10), rng.uniform(0, 100, 10))
        tau_c, tau_f = calibrate_thresholds(scores, 0.9)
        assert count_sq(scores, tau_c, tau_f) == 9


def test_calibrate_half_quota_with_flat_fine_scores():
    scores = scores_from([0.1 * i for i in range(1, 11)])
    tau_c, tau_f = calibrate_thresholds(scores, 0.5)
    assert count_sq(scores, tau_c, tau_f) == 5
    # the five lowest-Pc tensors are the ones passing
    for s in scores[:5]:
        assert select_method(s.pc, s.pf, tau_c, tau_f) is Method.SQ


def test_calibrate_all_degenerate_gives_all_sq():
    scores = scores_from([0.0] * 10)
    tau_c, tau_f = calibrate_thresholds(scores, 0.9)
    assert count_sq(scores, tau_c, tau_f) == 10


def test_calibrate_two_gate_split():
    # low-Pc group, but two of them carry huge fine scores
    pcs = [0.1, 0.2, 0.3, 0.4, 2.0, 3.0]
    pfs = [1.0, 900.0, 2.0, 800.0, 1.0, 1.0]
    scores = scores_from(pcs, pfs)
    tau_c, tau_f = calibrate_thresholds(scores, 1 / 3)
    chosen = [s.name for s in scores if select_method(s.pc, s.pf, tau_c, tau_f) is Method.SQ]
    assert chosen == ["t00", "t02"]


def test_calibrate_rejects_bad_rho():
    scores = scores_from([0.1, 0.2])
    for rho in (0.0, 1.0, -0.2, 1.5):
        with pytest.raises(ConfigError):
            calibrate_thresholds(scores, rho)


def test_calibrate_needs_two_tensors():
    with pytest.raises(ValidationError):
        calibrate_thresholds(scores_from([0.1]), 0.5)


def test_score_tensor_carries_name_and_n():
    w = WeightTensor("blk.w", np.array([[0.0, 1.0], [2.0, 4.0]], dtype=np.float32))
    s = score_tensor(w)
    assert s.name == "blk.w"
    assert s.n == 3
    assert s.pc == pytest.approx(PC_QUARTER_HALF, abs=1e-12)
    assert s.pf == pytest.approx(PF_QUARTER_HALF, abs=1e-12)


def bundle_of(arrays):
    bundle = ModelBundle()
    for i, arr in enumerate(arrays):
        data = np.asarray(arr, dtype=np.float32)
        kind = TensorKind.MATMUL if data.ndim == 2 else TensorKind.ELEMMUL
        bundle.add(WeightTensor(f"t{i:02d}", data), kind)
    return bundle


def test_plan_nine_to_one_average_bpw():
    rng = np.random.default_rng(14)
    arrays = [rng.uniform(-1, 1, size=(16, 16)) for _ in range(9)]
    centers = rng.uniform(-1, 1, 8)
    arrays.append(centers[rng.integers(0, 8, size=(16, 16))] + rng.normal(0, 1e-3, (16, 16)))
    p = plan(bundle_of(arrays), QuantConfig(tau_c="auto", tau_f="auto", sq_fraction=0.9))
    assert p.sq_fraction == pytest.approx(0.9)
    assert p.avg_bpw == Fraction(131, 40)
    assert float(p.avg_bpw) == 3.275


def test_plan_single_uniform_tensor_fixed_thresholds():
    rng = np.random.default_rng(15)
    bundle = bundle_of([rng.uniform(-1, 1, size=(32, 32))])
    p = plan(bundle, QuantConfig(tau_c=1.5, tau_f=50.0))
    assert p.entries[0].method is Method.SQ


def test_plan_two_cluster_tensor_goes_vq():
    rng = np.random.default_rng(16)
    vals = np.concatenate([np.zeros(512), np.full(512, 10.0)])
    vals += rng.normal(0, 1e-4, size=1024)
    p = plan(bundle_of([vals.reshape(32, 32)]), QuantConfig(tau_c=1.5, tau_f=50.0))
    assert p.entries[0].method is Method.VQ
    assert p.entries[0].pc > 1.5


def test_plan_respects_quantize_whitelist():
    rng = np.random.default_rng(17)
    bundle = bundle_of([rng.uniform(-1, 1, (8, 8)) for _ in range(4)])
    import json

    bundle.metadata["quantize"] = json.dumps(["t02", "t00"])
    p = plan(bundle, QuantConfig(tau_c=1.5, tau_f=50.0))
    assert [e.name for e in p.entries] == ["t02", "t00"]


def test_quantizable_names_validates_whitelist():
    bundle = bundle_of([np.zeros((2, 2))])
    bundle.metadata["quantize"] = "[\"nope\"]"
    with pytest.raises(ValidationError):
        quantizable_names(bundle)


def test_plan_entry_rule_invariant():
    rng = np.random.default_rng(18)
    arrays = [rng.uniform(-1, 1, (12, 12)) for _ in range(6)]
    arrays += [rng.normal(0, 1, (12, 12)) ** 3 for _ in range(6)]
    p = plan(bundle_of(arrays), QuantConfig(tau_c="auto", tau_f="auto", sq_fraction=0.5))
    for e in p.entries:
        want_sq = e.pc < p.tau_c and e.pf < p.tau_f
        assert (e.method is Method.SQ) == want_sq


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 64))
def test_permutation_invariance(seed, size):
    rng = np.random.default_rng(seed)
    vals = rng.normal(size=size)
    perm = rng.permutation(size)
    d0, d1 = intervals(vals), intervals(vals[perm])
    assert coarse_proxy(d0) == coarse_proxy(d1)
    assert fine_proxy(d0, 4)[0] == fine_proxy(d1, 4)[0]


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(-8, 8))
def test_scale_invariance_exact_for_powers_of_two(seed, exp):
    rng = np.random.default_rng(seed)
    vals = rng.normal(size=40)
    c = 2.0**exp
    assert coarse_proxy(intervals(vals)) == coarse_proxy(intervals(c * vals))
    assert fine_proxy(intervals(vals), 4)[0] == fine_proxy(intervals(c * vals), 4)[0]


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_scale_and_shift_invariance_approx(seed):
    rng = np.random.default_rng(seed)
    vals = rng.normal(size=64)
    c = float(rng.uniform(0.1, 10.0))
    s = float(rng.uniform(-5.0, 5.0))
    base = coarse_proxy(intervals(vals))
    assert coarse_proxy(intervals(c * vals)) == pytest.approx(base, rel=1e-9, abs=1e-9)
    assert coarse_proxy(intervals(vals + s)) == pytest.approx(base, rel=1e-6, abs=1e-6)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 200))
def test_coarse_bounds(seed, size):
    vals = np.random.default_rng(seed).normal(size=size) ** 3
    pc = coarse_proxy(intervals(vals))
    assert 0.0 <= pc <= math.log(size - 1) + 1e-12
