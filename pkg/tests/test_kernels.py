"""Backend equivalence and correctness of the hot-loop kernels."""

import os
import subprocess
import sys

import numpy as np
import pytest

from svquant.kernels import _numba, _numpy

BACKENDS = [_numpy, _numba]
ids = ["numpy", "numba"]


def naive_wkv(k, v, w, u):
    """Direct summation of the recurrence definition, no stabilization."""
    T, D = k.shape
    out = np.empty((T, D), dtype=np.float64)
    for t in range(T):
        num = np.exp(u + k[t]) * v[t]
        den = np.exp(u + k[t])
        for i in range(t):
            f = np.exp(-(t - 1 - i) * w + k[i])
            num = num + f * v[i]
            den = den + f
        out[t] = num / den
    return out


@pytest.fixture(params=BACKENDS, ids=ids)
def backend(request):
    return request.param


def test_assign_nearest_matches_brute_force(backend):
    rng = np.random.default_rng(0)
    for _ in range(20):
        n, m, d = rng.integers(1, 40), rng.integers(1, 30), rng.integers(1, 5)
        vecs = rng.normal(size=(n, d))
        cb = rng.normal(size=(m, d))
        got = backend.assign_nearest(vecs, cb)
        dist = ((vecs[:, None, :] - cb[None, :, :]) ** 2).sum(axis=2)
        assert np.array_equal(got, dist.argmin(axis=1))


def test_assign_nearest_tie_picks_lowest_index(backend):
    cb = np.array([[10.0], [0.0], [2.0]])
    vecs = np.array([[1.0]])
    assert backend.assign_nearest(vecs, cb)[0] == 1


def test_assign_exact_codeword_hit(backend):
    cb = np.array([[0.0, 0.0], [1.0, 2.0], [3.0, 1.0], [5.0, 5.0]])
    got = backend.assign_nearest(cb.copy(), cb)
    assert np.array_equal(got, [0, 1, 2, 3])


def test_assign_weighted_matches_brute_force(backend):
    rng = np.random.default_rng(1)
    for _ in range(20):
        n, m, d = rng.integers(1, 40), rng.integers(1, 30), rng.integers(1, 5)
        vecs = rng.normal(size=(n, d))
        wts = rng.uniform(0, 3, size=(n, d))
        cb = rng.normal(size=(m, d))
        got = backend.assign_nearest_weighted(vecs, wts, cb)
        dist = (wts[:, None, :] * (vecs[:, None, :] - cb[None, :, :]) ** 2).sum(axis=2)
        assert np.array_equal(got, dist.argmin(axis=1))


def test_weighted_assignment_can_flip_choice(backend):
    # weight on the second dim pulls the vector toward the row matching it
    cb = np.array([[1.0, 0.0], [0.0, 1.0]])
    vec = np.array([[0.6, 0.6]])
    ones = np.ones((1, 2))
    assert backend.assign_nearest_weighted(vec, ones, cb)[0] == 0
    wts = np.array([[0.05, 10.0]])
    assert backend.assign_nearest_weighted(vec, wts, cb)[0] == 1


def test_accumulate_clusters_matches_oracle(backend):
    rng = np.random.default_rng(2)
    vecs = rng.normal(size=(50, 3))
    idx = rng.integers(0, 7, size=50)
    sums, counts = backend.accumulate_clusters(vecs, idx, 7)
    want = np.zeros((7, 3))
    np.add.at(want, idx, vecs)
    assert np.allclose(sums, want, atol=1e-12)
    assert np.array_equal(counts, np.bincount(idx, minlength=7))


def test_accumulate_weighted_matches_oracle(backend):
    rng = np.random.default_rng(3)
    vecs = rng.normal(size=(50, 3))
    wts = rng.uniform(0, 2, size=(50, 3))
    idx = rng.integers(0, 5, size=50)
    wv, ws, vs, counts = backend.accumulate_clusters_weighted(vecs, wts, idx, 5)
    want_wv = np.zeros((5, 3))
    want_ws = np.zeros((5, 3))
    want_vs = np.zeros((5, 3))
    np.add.at(want_wv, idx, wts * vecs)
    np.add.at(want_ws, idx, wts)
    np.add.at(want_vs, idx, vecs)
    assert np.allclose(wv, want_wv, atol=1e-12)
    assert np.allclose(ws, want_ws, atol=1e-12)
    assert np.allclose(vs, want_vs, atol=1e-12)
    assert np.array_equal(counts, np.bincount(idx, minlength=5))


def test_empty_cluster_counts_zero(backend):
    vecs = np.ones((3, 2))
    idx = np.array([0, 0, 2], dtype=np.int64)
    _, counts = backend.accumulate_clusters(vecs, idx, 4)
    assert counts.tolist() == [2, 0, 1, 0]


def test_wkv_matches_naive_oracle(backend):
    rng = np.random.default_rng(4)
    for _ in range(30):
        T = int(rng.integers(1, 9))
        D = int(rng.integers(1, 5))
        k = rng.normal(0, 1, size=(T, D))
        v = rng.normal(0, 1, size=(T, D))
        w = rng.uniform(0.05, 2.0, size=D)
        u = rng.normal(0, 1, size=D)
        got = backend.wkv_sequence(k, v, w, u)
        want = naive_wkv(k, v, w, u)
        assert np.allclose(got, want, rtol=1e-10, atol=1e-12)


def test_wkv_first_step_returns_v1(backend):
    k = np.array([[3.0, -2.0]])
    v = np.array([[0.5, 7.0]])
    got = backend.wkv_sequence(k, v, np.array([0.3, 0.3]), np.array([1.0, -1.0]))
    assert np.allclose(got[0], v[0], atol=1e-14)


def test_wkv_is_convex_combination(backend):
    rng = np.random.default_rng(5)
    for _ in range(20):
        T, D = 12, 3
        k = rng.normal(0, 2, size=(T, D))
        v = rng.normal(0, 2, size=(T, D))
        w = rng.uniform(0.01, 1.0, size=D)
        u = rng.normal(0, 2, size=D)
        out = backend.wkv_sequence(k, v, w, u)
        for t in range(T):
            lo = v[: t + 1].min(axis=0)
            hi = v[: t + 1].max(axis=0)
            assert (out[t] >= lo - 1e-12).all()
            assert (out[t] <= hi + 1e-12).all()


def test_wkv_stable_under_huge_exponents(backend):
    # naive evaluation overflows here; the stabilized form must not
    k = np.full((4, 2), 400.0)
    v = np.arange(8, dtype=np.float64).reshape(4, 2)
    w = np.array([0.5, 1.0])
    u = np.array([300.0, 300.0])
    out = backend.wkv_sequence(k, v, w, u)
    assert np.isfinite(out).all()
    assert (out >= v.min()).all() and (out <= v.max()).all()


def test_backends_agree():
    rng = np.random.default_rng(6)
    vecs = rng.normal(size=(64, 4))
    wts = rng.uniform(0, 1, size=(64, 4))
    cb = rng.normal(size=(16, 4))
    assert np.array_equal(_numpy.assign_nearest(vecs, cb), _numba.assign_nearest(vecs, cb))
    assert np.array_equal(
        _numpy.assign_nearest_weighted(vecs, wts, cb),
        _numba.assign_nearest_weighted(vecs, wts, cb),
    )
    idx = _numpy.assign_nearest(vecs, cb)
    s0, c0 = _numpy.accumulate_clusters(vecs, idx, 16)
    s1, c1 = _numba.accumulate_clusters(vecs, idx, 16)
    assert np.allclose(s0, s1, atol=1e-12) and np.array_equal(c0, c1)
    k = rng.normal(size=(16, 4))
    v = rng.normal(size=(16, 4))
    w = rng.uniform(0.1, 1, size=4)
    u = rng.normal(size=4)
    assert np.allclose(
        _numpy.wkv_sequence(k, v, w, u), _numba.wkv_sequence(k, v, w, u), rtol=1e-12
    )


def test_env_flag_selects_numpy_backend():
    env = dict(os.environ, SVQUANT_NO_NUMBA="1")
    out = subprocess.run(
        [sys.executable, "-c", "import svquant.kernels as k; print(k.BACKEND)"],
        capture_output=True,
        text=True,
        env=env,
        check=True,
    )
    assert out.stdout.strip() == "numpy"


def test_default_backend_is_numba_when_available():
    env = {k: v for k, v in os.environ.items() if k != "SVQUANT_NO_NUMBA"}
    out = subprocess.run(
        [sys.executable, "-c", "import svquant.kernels as k; print(k.BACKEND)"],
        capture_output=True,
        text=True,
        env=env,
        check=True,
    )
    assert out.stdout.strip() == "numba"
