import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import trapezoid

from vbmc import BoundedSpace
from vbmc.posterior import TransformedPosterior, VariationalPosterior, divergence_between

from _util import random_vp


def grid_mass(log_pdf, lo, hi, n):
    axes = [np.linspace(a, b, n) for a, b in zip(lo, hi)]
    mesh = np.meshgrid(*axes, indexing="ij")
    P = np.exp(log_pdf(np.column_stack([m.ravel() for m in mesh]))).reshape(mesh[0].shape)
    for ax in reversed(axes):
        P = trapezoid(P, ax, axis=-1)
    return float(P)


def ten_sd_box(vp):
    mean, cov = vp.moments()
    half = 10 * np.sqrt(np.diag(cov)) + 10 * np.max(vp.scales, axis=0)
    return mean - half, mean + half


@pytest.mark.parametrize("D", [1, 2])
def test_pdf_normalizes(D):
    rng = np.random.default_rng(D)
    for _ in range(10):
        vp = random_vp(rng, D, K=int(rng.integers(1, 5)))
        lo, hi = ten_sd_box(vp)
        assert grid_mass(vp.log_pdf, lo, hi, 4001 if D == 1 else 801) == pytest.approx(1.0, abs=1e-4)


def test_bounded_original_space_pdf_normalizes():
    space = BoundedSpace([-1.0, 0.0], [2.0, 5.0])
    vp = VariationalPosterior([0.3, 0.7], [[0.0, -1.0], [1.0, 0.5]], [0.8, 0.5], [1.0, 1.5])
    tp = TransformedPosterior(vp, space)
    eps = 1e-9
    mass = grid_mass(tp.log_pdf, space.lower + eps, space.upper - eps, 1201)
    assert mass == pytest.approx(1.0, abs=1e-4)


def test_log_pdf_finite_far_away():
    vp = VariationalPosterior([1.0], [[0.0, 0.0]], [0.1], [0.1, 0.1])
    vals = vp.log_pdf(np.array([[1e6, 0.0], [0.0, -1e150], [3.0, 3.0]]))
    assert np.all(np.isfinite(vals))
    assert np.all(vals < -1e3)


def mc_check(mean, cov, X):
    n = X.shape[0]
    m_hat = X.mean(axis=0)
    se_mean = X.std(axis=0) / np.sqrt(n)
    assert np.all(np.abs(m_hat - mean) <= 5 * se_mean)
    C = X - m_hat
    prod = C[:, :, None] * C[:, None, :]
    se_cov = prod.std(axis=0) / np.sqrt(n)
    assert np.all(np.abs(prod.mean(axis=0) - cov) <= 5 * se_cov + 1e-12)


def test_moments_match_million_samples():
    rng = np.random.default_rng(11)
    for D in (1, 2, 3):
        vp = random_vp(rng, D, K=3)
        mc_check(*vp.moments(), vp.sample(1_000_000, seed=D))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 3), st.integers(1, 4))
def test_moments_consistent_with_sampling(seed, D, K):
    rng = np.random.default_rng(seed)
    vp = random_vp(rng, D, K)
    mc_check(*vp.moments(), vp.sample(100_000, seed=seed + 1))


def test_transformed_moments_match_samples_with_affine():
    rng = np.random.default_rng(12)
    vp = random_vp(rng, 2, K=2)
    space = BoundedSpace([-np.inf] * 2, [np.inf] * 2, [-3, -3], [3, 3])
    A = np.array([[2.0, 0.5], [0.0, 0.5]])
    tp = TransformedPosterior(vp, space, A, np.array([1.0, -1.0]))
    mc_check(*tp.moments(), tp.sample(1_000_000, seed=3))


def test_unconstrained_round_trip():
    rng = np.random.default_rng(13)
    vp = random_vp(rng, 3, K=4)
    back = VariationalPosterior.from_unconstrained(vp.to_unconstrained(), 4, 3)
    for name in ("weights", "means", "sigma", "lam"):
        assert np.allclose(getattr(back, name), getattr(vp, name), rtol=1e-12, atol=0)


def test_prune_drops_tiny_components():
    vp = VariationalPosterior([0.5, 1e-10, 0.5 - 1e-10], [[0.0], [1.0], [2.0]], [1, 1, 1], [1.0])
    pruned = vp.prune(1e-8)
    assert pruned.K == 2
    assert pruned.weights.sum() == pytest.approx(1.0)
    assert np.array_equal(pruned.means[:, 0], [0.0, 2.0])


def test_affine_diagonal_is_exact():
    rng = np.random.default_rng(14)
    vp = random_vp(rng, 2, K=2)
    A, b = np.diag([2.0, -0.5]), np.array([1.0, 3.0])
    out = vp.affine(A, b)
    x = rng.normal(size=(20, 2))
    # density of the pushforward: p(A^{-1}(y - b)) / |det A|
    expected = vp.log_pdf((x - b) @ np.linalg.inv(A).T) - np.log(abs(np.linalg.det(A)))
    assert np.allclose(out.log_pdf(x), expected, rtol=1e-12)


def test_invalid_parameters_rejected():
    with pytest.raises(ValueError):
        VariationalPosterior([0.5, 0.6], [[0.0], [1.0]], [1, 1], [1.0])
    with pytest.raises(ValueError):
        VariationalPosterior([1.0], [[0.0]], [0.0], [1.0])
    with pytest.raises(ValueError):
        VariationalPosterior([1.0], [[0.0, 1.0]], [1.0], [1.0])


def test_divergence_zero_for_identical_and_positive_otherwise():
    rng = np.random.default_rng(15)
    vp = random_vp(rng, 2)
    assert divergence_between(vp, vp, seed=1) == pytest.approx(0.0, abs=1e-12)
    a = VariationalPosterior([1.0], [[0.0]], [1.0], [1.0])
    b = VariationalPosterior([1.0], [[1.0]], [1.0], [1.0])
    est, se = divergence_between(a, b, n=20000, seed=2, return_se=True)
    # symmetrized KL between unit Gaussians one apart is 1/2
    assert abs(est - 0.5) < 5 * se


def test_serialization_round_trip_is_exact():
    rng = np.random.default_rng(16)
    vp = random_vp(rng, 2, K=3)
    space = BoundedSpace([0.0, -np.inf], [1.0, np.inf], [0.1, -2], [0.9, 2])
    tp = TransformedPosterior(vp, space, np.array([[1.0, 0.2], [0.3, 2.0]]), np.array([0.5, -0.5]))
    back = TransformedPosterior.loads(tp.dumps())
    assert back.space == space
    assert np.array_equal(back.A, tp.A) and np.array_equal(back.b, tp.b)
    assert np.array_equal(back.vp.means, vp.means) and np.array_equal(back.vp.lam, vp.lam)
    assert np.array_equal(back.sample(10, seed=1), tp.sample(10, seed=1))


def test_loads_rejects_garbage():
    with pytest.raises(ValueError):
        TransformedPosterior.loads("hello\n")
    with pytest.raises(ValueError):
        TransformedPosterior.loads("format = vbmc-posterior/1\ndim = 1\n")
