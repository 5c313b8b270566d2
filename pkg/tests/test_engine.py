import dataclasses

import numpy as np
import pytest

from vbmc import BoundedSpace, Options, TargetError, run
from vbmc.demos import ConjugateGaussian
from vbmc.engine import (
    EngineState,
    IterationRecord,
    apply_whitening,
    initial_design,
    reliability_index,
)
from vbmc.posterior import VariationalPosterior

FREE2 = BoundedSpace([-np.inf] * 2, [np.inf] * 2, [-3, -3], [3, 3])


def record(i, elbo, sd=0.0, div=0.0, warmup=False):
    return IterationRecord(i, 10 + 5 * i, elbo, sd, div, 0.0, 1, False, warmup)


@pytest.fixture(scope="module")
def gaussian_run():
    model = ConjugateGaussian(np.array([0.5, -0.5]), np.diag([0.3, 0.6]))
    return model, run(model, FREE2, Options(seed=3))


def test_initial_design_fills_plausible_box():
    space = BoundedSpace([0, -np.inf], [10, np.inf], [1, -2], [9, 2])
    U = initial_design(space, n=10, seed=1)
    X = space.to_original(U)
    assert U.shape == (10, 2)
    assert np.all(X >= space.plausible_lower) and np.all(X <= space.plausible_upper)
    assert len({tuple(r) for r in U}) == 10
    assert np.array_equal(U, initial_design(space, n=10, seed=1))
    assert not np.array_equal(U, initial_design(space, n=10, seed=2))


def test_initial_design_starts_at_x0():
    space = BoundedSpace([0.0], [1.0])
    U = initial_design(space, x0=[0.25], n=4)
    assert space.to_original(U[0])[0] == pytest.approx(0.25)
    with pytest.raises(ValueError):
        initial_design(space, x0=[1.0], n=4)


def test_reliability_index_formula():
    recs = [record(1, -3.0), record(2, -3.05, sd=0.02, div=0.004)]
    assert reliability_index(recs) == pytest.approx(0.5)
    recs = [record(1, -3.0), record(2, -3.0, sd=0.2, div=0.0)]
    assert reliability_index(recs) == pytest.approx(2.0)
    recs = [record(1, -3.0), record(2, -3.0, sd=0.0, div=0.03)]
    assert reliability_index(recs) == pytest.approx(3.0)
    with pytest.raises(ValueError):
        reliability_index(recs[:1])


def test_whitening_makes_posterior_isotropic():
    vp = VariationalPosterior([1.0], [[1.0, -2.0]], [2.0], [0.5, 3.0])
    D = 2
    state = EngineState(FREE2, np.eye(D), np.zeros(D), np.zeros((1, D)), np.zeros(1), np.zeros(1), vp=vp)
    white = apply_whitening(state)
    _, cov = white.vp.moments()
    assert np.allclose(cov, np.eye(2))
    assert white.whitenings == 1 and white.hyper is None
    # the same original-space density before and after
    x = np.random.default_rng(0).normal(size=(5, 2))
    assert np.allclose(state.posterior().log_pdf(x), white.posterior().log_pdf(x))


def test_run_recovers_gaussian(gaussian_run):
    model, res = gaussian_run
    assert res.converged
    assert res.elbo.elbo == pytest.approx(model.log_evidence, abs=0.1)
    mean, cov = model.posterior_moments
    m, c = res.vp.moments()
    assert np.allclose(m, mean, atol=0.05)
    assert np.allclose(c, cov, atol=0.05)
    assert res.sample(100, seed=1).shape == (100, 2)


def test_evaluation_accounting(gaussian_run):
    _, res = gaussian_run
    opts = Options()
    assert res.evaluations_used == opts.init_design_size + opts.points_per_iteration * len(res.trace)
    assert len(res.evaluations) == res.evaluations_used
    evals = [r.evaluations for r in res.trace]
    assert all(b > a for a, b in zip(evals, evals[1:]))
    assert all(1 <= r.K <= opts.K_max for r in res.trace)
    assert [r.iteration for r in res.trace] == list(range(1, len(res.trace) + 1))


def test_convergence_flag_replays_from_trace(gaussian_run):
    _, res = gaussian_run
    tail = res.trace[-3:]
    assert all(not r.warmup for r in tail)
    assert all(r.reliability_index <= 1.0 for r in tail)
    for i in range(len(res.trace) - 3, len(res.trace)):
        assert reliability_index(res.trace[i - 1 : i + 1]) == pytest.approx(res.trace[i].reliability_index)


def test_budget_respected_and_warning_on_non_convergence():
    res = run(ConjugateGaussian.rotated(2, seed=1), FREE2, Options(max_evaluations=22, seed=0))
    assert res.evaluations_used == 20
    assert not res.converged
    assert len(res.trace) == 2
    assert any("budget" in w for w in res.warnings)


def test_budget_below_initial_design():
    res = run(ConjugateGaussian.rotated(1, seed=1),
              BoundedSpace([-np.inf], [np.inf], [-3], [3]), Options(max_evaluations=6))
    assert res.evaluations_used == 6 and res.trace == [] and not res.converged


def test_bounded_space_run_stays_inside():
    space = BoundedSpace([0.0, 0.0], [1.0, 1.0])

    def beta_like(x):
        return float(np.sum(2 * np.log(x) + 3 * np.log1p(-x)))

    res = run(beta_like, space, Options(max_evaluations=40, seed=2))
    X = np.array([e.x for e in res.evaluations])
    assert np.all(space.is_interior(X))
    assert np.all(space.is_interior(res.sample(1000, seed=0)))


def test_non_finite_in_initial_design_raises():
    with pytest.raises(TargetError, match="initial design"):
        run(lambda x: np.nan, FREE2, Options(max_evaluations=20))


def test_later_non_finite_values_are_penalized():
    model = ConjugateGaussian(np.zeros(2), np.eye(2))
    calls = []

    def flaky(x):
        calls.append(1)
        return np.nan if len(calls) in (12, 13) else model(x)

    res = run(flaky, FREE2, Options(max_evaluations=30, seed=1))
    assert sum("non-finite" in w for w in res.warnings) == 2
    assert np.isfinite(res.elbo.elbo)


def test_target_failure_carries_trace():
    calls = []

    def dies(x):
        calls.append(1)
        if len(calls) > 22:
            raise RuntimeError("license server down")
        return -0.5 * float(x @ x)

    with pytest.raises(TargetError) as info:
        run(dies, FREE2, Options(max_evaluations=60, seed=0))
    assert "iteration 3" in str(info.value)
    assert len(info.value.trace) == 2


def test_whitening_on_correlated_target():
    model = ConjugateGaussian(np.array([0.0, 0.0]), np.array([[1.0, 0.95], [0.95, 1.0]]) * 0.5)
    res = run(model, FREE2, Options(seed=1))
    assert any(r.whitening_applied for r in res.trace)
    assert res.elbo.elbo == pytest.approx(model.log_evidence, abs=0.15)


def test_whitening_preserves_answer():
    model = ConjugateGaussian(np.array([0.3, -0.2]), 0.4 * np.eye(2))
    n = 20_000
    plain = run(model, FREE2, Options(seed=5, max_whitenings=0))
    forced = run(model, FREE2, Options(seed=5, whitening_condition=1.0))
    assert any(r.whitening_applied for r in forced.trace)
    a, b = plain.sample(n, seed=1), forced.sample(n, seed=2)
    se_mean = np.sqrt((a.var(axis=0) + b.var(axis=0)) / n)
    assert np.all(np.abs(a.mean(axis=0) - b.mean(axis=0)) <= 3 * se_mean)
    va, vb = a.var(axis=0), b.var(axis=0)
    se_var = np.sqrt(2 * va**2 / n + 2 * vb**2 / n)
    assert np.all(np.abs(va - vb) <= 3 * se_var)


def test_runs_are_deterministic():
    model = ConjugateGaussian.rotated(2, seed=4)
    a = run(model, FREE2, Options(seed=8, max_evaluations=40))
    b = run(model, FREE2, Options(seed=8, max_evaluations=40))

    def strip(trace):
        return [dataclasses.replace(r, wall_time=0.0) for r in trace]

    assert strip(a.trace) == strip(b.trace)
    assert a.elbo == b.elbo
    assert np.array_equal(a.vp.vp.to_unconstrained(), b.vp.vp.to_unconstrained())


def test_options_validation():
    with pytest.raises(ValueError):
        Options(points_per_iteration=0)
    assert Options().resolved(3).max_evaluations == 250
