import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from prerankcal.numerics import (
    NotPositiveDefinite, RngStream, TooFewSamples, cholesky, mvn_sample, sample_covariance, sym_eigen,
)


def random_spd(rng, d):
    a = rng.standard_normal((d, d))
    return a @ a.T + d * 1e-2 * np.eye(d)


def test_cholesky_examples():
    np.testing.assert_allclose(cholesky([[4.0, 2.0], [2.0, 5.0]]), [[2, 0], [1, 2]], atol=1e-14)
    np.testing.assert_array_equal(cholesky(np.eye(3)), np.eye(3))
    with pytest.raises(NotPositiveDefinite):
        cholesky([[1.0, 2.0], [2.0, 1.0]])


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 12), st.integers(0, 2**32 - 1))
def test_cholesky_roundtrip_on_lower_triangular(d, seed):
    rng = np.random.default_rng(seed)
    L = np.tril(rng.standard_normal((d, d)))
    np.fill_diagonal(L, np.abs(np.diag(L)) + 0.5)
    np.testing.assert_allclose(cholesky(L @ L.T), L, atol=1e-10 * np.abs(L).max() * d)


def test_eigen_examples():
    e = sym_eigen(np.array([[2.0, 1.0], [1.0, 2.0]]))
    np.testing.assert_allclose(e.values, [3, 1], atol=1e-14)
    s = 1 / np.sqrt(2)
    np.testing.assert_allclose(e.vectors, [[s, s], [s, -s]], atol=1e-14)
    e = sym_eigen(np.diag([5.0, 2.0]))
    np.testing.assert_array_equal(e.values, [5, 2])
    np.testing.assert_array_equal(e.vectors, np.eye(2))
    e = sym_eigen(np.eye(2))
    np.testing.assert_array_equal(e.values, [1, 1])
    np.testing.assert_allclose(e.vectors.T @ e.vectors, np.eye(2), atol=1e-14)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 32), st.integers(0, 2**32 - 1))
def test_eigen_against_numpy_oracle(d, seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((d, d))
    a = a + a.T
    e = sym_eigen(a)
    ref = np.linalg.eigvalsh(a)[::-1]
    scale = max(1.0, np.abs(ref).max())
    np.testing.assert_allclose(e.values, ref, atol=1e-10 * scale)
    assert np.all(np.diff(e.values) <= 0)
    np.testing.assert_allclose(e.vectors.T @ e.vectors, np.eye(d), atol=1e-10)
    assert np.linalg.norm(e.reconstruct() - a) <= 1e-10 * np.linalg.norm(a)
    # sign convention: largest-magnitude entry positive
    idx = np.argmax(np.abs(e.vectors), axis=0)
    assert np.all(e.vectors[idx, np.arange(d)] > 0)


def test_eigen_batched_matches_single():
    rng = np.random.default_rng(3)
    mats = np.stack([random_spd(rng, 5) for _ in range(4)])
    batched = sym_eigen(mats)
    for i in range(4):
        single = sym_eigen(mats[i])
        np.testing.assert_allclose(batched.values[i], single.values, atol=1e-12)
        np.testing.assert_allclose(batched.vectors[i], single.vectors, atol=1e-10)


def test_sample_covariance_examples():
    s = np.array([[1.0, 0], [-1, 0], [0, 2], [0, -2]])
    np.testing.assert_allclose(sample_covariance(s), np.diag([0.5, 2.0]), atol=1e-15)
    v = np.array([[1.5, -2.0, 3.0]] * 2)
    np.testing.assert_array_equal(sample_covariance(v), np.zeros((3, 3)))
    np.testing.assert_allclose(sample_covariance(np.array([[1.0], [3.0]])), [[1.0]])
    with pytest.raises(TooFewSamples):
        sample_covariance(np.array([[1.0, 2.0]]))


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 30), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_sample_covariance_order_invariant(m, d, seed):
    rng = np.random.default_rng(seed)
    s = rng.standard_normal((m, d))
    perm = rng.permutation(m)
    c1, c2 = sample_covariance(s), sample_covariance(s[perm])
    np.testing.assert_array_equal(c1, c2)
    np.testing.assert_array_equal(c1, c1.T)
    assert np.linalg.eigvalsh(c1).min() > -1e-12


def test_mvn_sample_zero_noise_and_identity_oracle():
    mean = np.array([1.0, -2.0])
    L = cholesky([[4.0, 2.0], [2.0, 5.0]])
    np.testing.assert_array_equal(mvn_sample(mean, L, eps=np.zeros(2)), mean)
    draws = mvn_sample(np.zeros(3), np.eye(3), rng=RngStream(5), size=100_000)
    np.testing.assert_allclose(np.cov(draws.T, bias=True), np.eye(3), atol=0.05)
    # mean within a 3-sigma/sqrt(M) bound
    assert np.all(np.abs(draws.mean(axis=0)) < 3 / np.sqrt(100_000))


def test_rng_stream_determinism():
    a = mvn_sample(np.zeros(4), np.eye(4), rng=RngStream(11, 3), size=50)
    b = mvn_sample(np.zeros(4), np.eye(4), rng=RngStream(11, 3), size=50)
    c = mvn_sample(np.zeros(4), np.eye(4), rng=RngStream(11, 4), size=50)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
    assert RngStream(1, 2).spawn(3) == RngStream(1, (2, 3))
