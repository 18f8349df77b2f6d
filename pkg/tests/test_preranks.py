import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from prerankcal import autodiff as ad
from prerankcal.model import MixtureParams, log_density
from prerankcal.numerics import TooFewSamples
from prerankcal.preranks import (
    DegenerateSpectrumWarning, DegenerateVector, DensityUnavailable, IndexOutOfRange, NoSamples, PreRank,
    PreRankContext, PreRankError, copula, dependency, hdr, location, marginal, pca_direction, pca_prerank, scale,
)

vectors = st.lists(st.floats(-10, 10), min_size=3, max_size=8).map(np.array)


def test_marginal_location_scale_examples():
    assert marginal(np.array([7.0, -1, 4]), 2) == -1
    assert marginal(np.array([5.0]), 1) == 5
    with pytest.raises(IndexOutOfRange):
        marginal(np.zeros(2), 3)
    assert location(np.array([1.0, 2, 3])) == 2
    assert location(np.full(4, 2.5)) == 2.5
    assert location(np.array([-1.0, 1])) == 0
    assert scale(np.array([1.0, 2, 3])) == pytest.approx(2 / 3, abs=1e-15)
    assert scale(np.full(3, 4.0)) == 0
    assert scale(np.array([0.0, 2])) == 1


def test_dependency_examples():
    assert dependency(np.array([0.0, 1, 3]), 1) == pytest.approx(-45 / 56, abs=1e-14)
    a, c = 3.0, 0.5
    y = a + c * np.arange(6)
    gamma = c**2 / 2
    assert dependency(y, 1) == pytest.approx(-gamma / scale(y), abs=1e-13)
    assert dependency(y - 100, 1) == pytest.approx(dependency(y, 1), abs=1e-12)
    with pytest.raises(DegenerateVector):
        dependency(np.array([1.0, 1.0]), 1)
    with pytest.raises(IndexOutOfRange):
        dependency(np.zeros(3), 3)


@settings(max_examples=60, deadline=None)
@given(vectors, st.floats(0.1, 10), st.floats(-5, 5))
def test_dependency_invariances(y, c, shift):
    if scale(y) < 1e-3:
        return
    base = dependency(y, 1)
    assert dependency(c * y, 1) == pytest.approx(base, rel=1e-12, abs=1e-12)
    assert dependency(-c * y, 1) == pytest.approx(base, rel=1e-12, abs=1e-12)
    assert dependency(y + shift, 1) == pytest.approx(base, rel=1e-9, abs=1e-9)
    assert dependency(y[::-1], 1) == pytest.approx(base, rel=1e-12, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(vectors, st.randoms(use_true_random=False))
def test_location_scale_permutation_invariant(y, rnd):
    perm = list(range(y.size))
    rnd.shuffle(perm)
    assert location(y[perm]) == pytest.approx(location(y), abs=1e-12)
    assert scale(y[perm]) == pytest.approx(scale(y), rel=1e-12, abs=1e-12)


def gaussian_ctx(d=2):
    params = MixtureParams(np.zeros(1), np.zeros((1, d)), np.eye(d)[None])
    return PreRankContext(log_density=lambda p: log_density(params, p))


def test_hdr_examples():
    assert hdr(np.zeros(2), gaussian_ctx()) == pytest.approx(1 / (2 * np.pi), abs=1e-14)
    assert hdr(np.zeros(2), gaussian_ctx()) >= hdr(np.array([0.3, -0.1]), gaussian_ctx())
    twin = MixtureParams.from_arrays([0.5, 0.5], np.zeros((2, 2)), np.stack([np.eye(2)] * 2))
    ctx = PreRankContext(log_density=lambda p: log_density(twin, p))
    assert hdr(np.array([0.4, 1.0]), ctx) == pytest.approx(hdr(np.array([0.4, 1.0]), gaussian_ctx()), rel=1e-14)
    with pytest.raises(DensityUnavailable):
        hdr(np.zeros(2), PreRankContext())


def test_copula_examples():
    ctx = PreRankContext(samples=np.zeros((1, 2)), tau_cop=7.0)
    assert copula(np.ones(2), ctx, "hard") == 1.0
    assert copula(np.zeros(2), ctx, "smooth") == pytest.approx(0.25, abs=1e-15)
    with pytest.raises(NoSamples):
        copula(np.zeros(2), PreRankContext(samples=np.zeros((0, 2))))


def test_copula_against_quadrature_oracle():
    rho = 0.5
    cov = np.array([[1, rho], [rho, 1]])
    s = np.random.default_rng(1).multivariate_normal(np.zeros(2), cov, 100_000)
    y = np.array([0.3, -0.2])
    # P(X<=a, Y<=b) = int_{-inf}^a phi(x) Phi((b - rho x)/sqrt(1-rho^2)) dx on a fine grid
    from math import erf
    xs = np.linspace(-9, y[0], 20001)
    phi = np.exp(-xs**2 / 2) / np.sqrt(2 * np.pi)
    Phi = 0.5 * (1 + np.vectorize(erf)((y[1] - rho * xs) / np.sqrt(2 * (1 - rho**2))))
    f = phi * Phi
    exact = np.sum((f[1:] + f[:-1]) / 2 * np.diff(xs))
    assert copula(y, PreRankContext(samples=s), "hard") == pytest.approx(exact, abs=0.01)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=2, max_size=2), st.integers(0, 1), st.floats(0, 2))
def test_smooth_copula_bounds_and_monotone(y, coord, bump):
    s = np.random.default_rng(0).standard_normal((30, 2))
    ctx = PreRankContext(samples=s, tau_cop=5.0)
    y = np.array(y)
    v = copula(y, ctx, "smooth")
    assert 0 < v < 1
    y2 = y.copy()
    y2[coord] += bump
    assert copula(y2, ctx, "smooth") >= v


def test_pca_examples():
    s = np.array([[1.0, 0], [-1, 0], [0, 2], [0, -2]])
    y = np.array([3.0, 5.0])
    assert pca_prerank(y, s, 1) == pytest.approx(5.0, abs=1e-14)
    assert pca_prerank(y, s, 2) == pytest.approx(3.0, abs=1e-14)
    assert pca_prerank(np.zeros(2), s, 1) == 0
    with pytest.raises(TooFewSamples):
        pca_prerank(y, s[:1], 1)
    with pytest.raises(IndexOutOfRange):
        pca_prerank(y, s[:2], 2)


def test_pca_degenerate_warning():
    s = np.array([[1.0, 0], [-1, 0], [0, 1], [0, -1]])
    with pytest.warns(DegenerateSpectrumWarning):
        pca_prerank(np.ones(2), s, 1)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 10))
def test_pca_equivariance(seed, c):
    rng = np.random.default_rng(seed)
    s = rng.standard_normal((40, 4)) * np.array([3.0, 2.0, 1.0, 0.5])
    y = rng.standard_normal(4)
    base = pca_prerank(y, s, 1)
    assert pca_prerank(c * y, c * s, 1) == pytest.approx(c * base, rel=1e-10, abs=1e-10)
    q, _ = np.linalg.qr(rng.standard_normal((4, 4)))
    rotated = pca_prerank(q @ y, s @ q.T, 1)
    assert abs(rotated) == pytest.approx(abs(base), rel=1e-8, abs=1e-8)


def test_registry_names():
    assert PreRank.parse("marg:2") == PreRank("marg", 2)
    assert PreRank.parse("marg").param is None
    assert PreRank.parse("dep").name == "dep:1"
    assert PreRank.parse("pca:3").name == "pca:3"
    assert not PreRank.parse("pca").differentiable
    for bad in ("loc:1", "foo", "dep:x", "marg:"):
        with pytest.raises(PreRankError):
            PreRank.parse(bad)


def test_smooth_preranks_are_differentiable():
    y = np.array([[0.2, -1.0, 0.7], [1.5, 0.1, -0.3]])
    for name in ("loc", "scale", "dep:1", "marg:2"):
        pr = PreRank.parse(name)
        loss = lambda t: ad.sum_(pr.apply(ad.reshape(t, (2, 3))))
        assert ad.check_gradient(loss, y.ravel(), 1e-6) < 1e-6
