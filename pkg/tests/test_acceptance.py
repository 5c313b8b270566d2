"""End-to-end acceptance checks, one test group per criterion.

Run ``pytest tests/test_acceptance.py`` to get a PASS/FAIL line per criterion
in the terminal summary.
"""

import csv
import math
import sys
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.integrate import trapezoid
from scipy.special import logsumexp

from vbmc import BoundedSpace, Options, SubprocessTarget, TargetError, run
from vbmc.cli import main as cli_main
from vbmc.demos import ConjugateGaussian, quadratic, rosenbrock_log_joint
from vbmc.gp import GpHyperparams, log_marginal_likelihood
from vbmc.posterior import VariationalPosterior
from vbmc.quadrature import entropy_mc, expected_log_joint

from _util import central_diff, random_gp, random_vp, rel_err

CHILD = str(Path(__file__).with_name("ref_child.py"))
SEEDS = (0, 1, 2)


def free_space(D):
    return BoundedSpace([-np.inf] * D, [np.inf] * D, [-3.0] * D, [3.0] * D)


# -- 1: banana-shaped target with an 80-evaluation budget ---------------------

# Dense-grid ground truth; an adaptive dblquad over the same box agrees to 1e-14.
ROSENBROCK_LOG_Z = -1.652789732778789
ROSENBROCK_MEAN = np.array([0.300785308755543, 0.302344568145402])


def rosenbrock_ground_truth():
    g = np.linspace(-8.0, 8.0, 2001)
    X1, X2 = np.meshgrid(g, g, indexing="ij")
    L = (-((X2 - X1**2) ** 2) / (2 * 0.25) - (X1 - 1) ** 2 / 2
         - 0.5 * (X1**2 + X2**2) - math.log(2 * math.pi))
    h = g[1] - g[0]
    log_z = logsumexp(L) + 2 * math.log(h)
    P = np.exp(L - logsumexp(L))
    return log_z, np.array([(P * X1).sum(), (P * X2).sum()])


@pytest.mark.criterion(1, "banana target, 80 evaluations: ELBO within 0.5 of log Z, mean within 0.2")
def test_rosenbrock_budget_and_accuracy(record_property):
    log_z, mean = rosenbrock_ground_truth()
    assert log_z == pytest.approx(ROSENBROCK_LOG_Z, abs=1e-10)
    assert np.allclose(mean, ROSENBROCK_MEAN, atol=1e-10)
    worst_elbo, worst_mean, slowest = 0.0, 0.0, 0.0
    for seed in SEEDS:
        start = time.monotonic()
        res = run(rosenbrock_log_joint, free_space(2), Options(max_evaluations=80, seed=seed))
        slowest = max(slowest, time.monotonic() - start)
        assert res.evaluations_used <= 80
        worst_elbo = max(worst_elbo, abs(res.elbo.elbo - log_z))
        worst_mean = max(worst_mean, float(np.max(np.abs(res.vp.moments()[0] - mean))))
    record_property("detail", f"max |ELBO-logZ| {worst_elbo:.3f}, max mean error {worst_mean:.3f}, "
                              f"slowest run {slowest:.1f} s")
    assert worst_elbo <= 0.5
    assert worst_mean <= 0.2
    assert slowest < 60


# -- 2: conjugate Gaussian models with known evidence --------------------------

@pytest.mark.criterion(2, "conjugate Gaussian D=1,2,4: |ELBO - log Z| <= 0.1 and converged, 3 seeds")
@pytest.mark.parametrize("D", [1, 2, 4])
def test_conjugate_evidence(D, record_property):
    model = ConjugateGaussian.rotated(D, seed=100 + D)
    errors, used = [], []
    for seed in SEEDS:
        res = run(model, free_space(D), Options(seed=seed))
        errors.append(res.elbo.elbo - model.log_evidence)
        used.append(res.evaluations_used)
        assert res.converged, f"seed {seed} did not converge"
        assert res.evaluations_used <= 50 * (D + 2)
    record_property("detail", f"D={D} max |err| {max(map(abs, errors)):.3f} evaluations {used}")
    assert max(map(abs, errors)) <= 0.1


# -- 3: noisy log-density estimates -----------------------------------------

@pytest.mark.criterion(3, "noisy D=2 target (sd 1): |ELBO - log Z| <= 0.5 within 400 evaluations, 3 seeds")
def test_noisy_target(record_property):
    errors = []
    for seed in SEEDS:
        model = _noisy_model(seed)
        res = run(model, free_space(2), Options(max_evaluations=400, seed=seed))
        assert res.evaluations_used <= 400
        errors.append(res.elbo.elbo - model.log_evidence)
    record_property("detail", "errors " + ", ".join(f"{e:+.3f}" for e in errors))
    assert max(map(abs, errors)) <= 0.5


def _noisy_model(seed):
    base = ConjugateGaussian.rotated(2, seed=102)
    return ConjugateGaussian(base.mu, base.cov, noise_sd=1.0, seed=1000 + seed)


# -- 4: closed-form quadrature against a dense grid -----------------------------

def grid_expectation(vp, f, n):
    lo = np.min(vp.means - 10 * vp.scales, axis=0)
    hi = np.max(vp.means + 10 * vp.scales, axis=0)
    axes = [np.linspace(a, b, n) for a, b in zip(lo, hi)]
    mesh = np.meshgrid(*axes, indexing="ij")
    X = np.column_stack([m.ravel() for m in mesh])
    P = (np.exp(vp.log_pdf(X)) * f(X)).reshape(mesh[0].shape)
    for ax in reversed(axes):
        P = trapezoid(P, ax, axis=-1)
    return float(P)


@pytest.mark.criterion(4, "closed-form expected log joint vs grid quadrature, 100 instances, rel err <= 1e-6")
def test_bq_grid_equivalence(record_property):
    rng = np.random.default_rng(2024)
    worst = 0.0
    for i in range(100):
        D = 1 + i % 2
        gp, vp = random_gp(rng, D), random_vp(rng, D)
        value, _, _ = expected_log_joint(vp, gp, compute_grad=False)
        oracle = grid_expectation(vp, lambda X: gp.predict(X)[0], 6001 if D == 1 else 601)
        worst = max(worst, abs(value - oracle) / abs(oracle))
    record_property("detail", f"worst relative error {worst:.2e}")
    assert worst <= 1e-6


# -- 5: analytic gradients ---------------------------------------------------------

@pytest.mark.criterion(5, "analytic gradients vs central differences, 50 instances each, rel err <= 1e-5")
def test_gradients(record_property):
    rng = np.random.default_rng(77)
    worst = {"lml": 0.0, "elj": 0.0, "entropy": 0.0}
    for i in range(50):
        D = int(rng.integers(1, 4))
        gp = random_gp(rng, D, noisy=bool(i % 2))
        hyper = GpHyperparams.from_vector(
            np.concatenate([gp.hyper.to_vector()[: D + 1], [rng.uniform(-2.5, -1.0)],
                            gp.hyper.to_vector()[D + 2:]]), D)
        _, g = log_marginal_likelihood(hyper, gp.data)
        fd = central_diff(lambda t: log_marginal_likelihood(GpHyperparams.from_vector(t, D), gp.data)[0],
                          hyper.to_vector())
        worst["lml"] = max(worst["lml"], rel_err(g, fd))

        vp = random_vp(rng, D)
        K = vp.K
        theta = vp.to_unconstrained()
        _, _, g = expected_log_joint(vp, gp)
        fd = central_diff(lambda t: expected_log_joint(VariationalPosterior.from_unconstrained(t, K, D), gp,
                                                       compute_grad=False)[0], theta)
        worst["elj"] = max(worst["elj"], rel_err(g, fd))

        _, g = entropy_mc(vp, 64, seed=i)
        fd = central_diff(lambda t: entropy_mc(VariationalPosterior.from_unconstrained(t, K, D), 64, seed=i,
                                               compute_grad=False)[0], theta)
        worst["entropy"] = max(worst["entropy"], rel_err(g, fd))
    record_property("detail", ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))
    assert max(worst.values()) <= 1e-5


# -- 6: transform and posterior properties ------------------------------------------

@pytest.mark.criterion(6, "transform round trip, mixture normalization, moments vs 1e6 samples")
def test_transform_round_trip(record_property):
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(1000):
        lo = rng.uniform(-1e3, 1e3)
        hi = lo + 10 ** rng.uniform(-3, 3)
        x = lo + (hi - lo) * rng.uniform(1e-6, 1 - 1e-6)
        space = BoundedSpace([lo], [hi])
        back = space.to_original(space.to_unbounded([x]))[0]
        worst = max(worst, abs(back - x) / (1 + abs(x)))
    record_property("detail", f"round trip {worst:.1e}")
    assert worst <= 1e-10


@pytest.mark.criterion(6, "transform round trip, mixture normalization, moments vs 1e6 samples")
@pytest.mark.parametrize("D", [1, 2])
def test_mixture_normalization(D, record_property):
    rng = np.random.default_rng(60 + D)
    worst = 0.0
    for _ in range(10):
        vp = random_vp(rng, D, K=int(rng.integers(1, 5)))
        mean, cov = vp.moments()
        half = 10 * np.sqrt(np.diag(cov)) + 10 * np.max(vp.scales, axis=0)
        n = 4001 if D == 1 else 801
        axes = [np.linspace(m - h, m + h, n) for m, h in zip(mean, half)]
        mesh = np.meshgrid(*axes, indexing="ij")
        P = np.exp(vp.log_pdf(np.column_stack([m.ravel() for m in mesh]))).reshape(mesh[0].shape)
        for ax in reversed(axes):
            P = trapezoid(P, ax, axis=-1)
        worst = max(worst, abs(float(P) - 1.0))
    record_property("detail", f"D={D} normalization {worst:.1e}")
    assert worst <= 1e-4


@pytest.mark.criterion(6, "transform round trip, mixture normalization, moments vs 1e6 samples")
def test_moments_against_monte_carlo(record_property):
    rng = np.random.default_rng(66)
    worst = 0.0
    for D in (1, 2, 3):
        vp = random_vp(rng, D, K=3)
        mean, cov = vp.moments()
        X = vp.sample(1_000_000, seed=D)
        n = X.shape[0]
        z_mean = np.abs(X.mean(axis=0) - mean) / (X.std(axis=0) / math.sqrt(n))
        C = X - X.mean(axis=0)
        prod = C[:, :, None] * C[:, None, :]
        z_cov = np.abs(prod.mean(axis=0) - cov) / (prod.std(axis=0) / math.sqrt(n))
        worst = max(worst, float(z_mean.max()), float(z_cov.max()))
    record_property("detail", f"largest deviation {worst:.2f} standard errors")
    assert worst <= 5


# -- 7: determinism ------------------------------------------------------------------

CONFIG = """[target]
kind = demo
name = rosenbrock

[bounds]
lower = -inf -inf
upper = inf inf
plausible_lower = -3 -3
plausible_upper = 3 3

[options]
seed = 11
max_evaluations = 60

[output]
directory = {out}
"""


def _artifacts(directory):
    result = [line for line in (directory / "result.txt").read_text().splitlines()
              if not line.startswith("wall_time")]
    with open(directory / "trace.csv") as fh:
        trace = [row[:-1] for row in csv.reader(fh)]
    with open(directory / "evaluations.csv") as fh:
        evals = [row[:-1] for row in csv.reader(fh)]
    return result, trace, evals, (directory / "vp.txt").read_text()


@pytest.mark.criterion(7, "identical config and seed give identical traces and results")
def test_determinism(tmp_path, record_property):
    outputs = []
    for name in ("first", "second"):
        cfg = tmp_path / f"{name}.ini"
        cfg.write_text(CONFIG.format(out=name))
        cli_main(["run", str(cfg)])
        outputs.append(_artifacts(tmp_path / name))
    record_property("detail", f"{len(outputs[0][1]) - 1} trace rows compared")
    assert outputs[0] == outputs[1]


# -- 8: child-process protocol ---------------------------------------------------------

def _child(mode="ok", dim=3, **kw):
    return SubprocessTarget([sys.executable, CHILD, str(dim), mode], **kw)


@pytest.mark.criterion(8, "subprocess protocol: handshake, 500 evaluations, nan path, timeout path")
def test_subprocess_evaluations(record_property):
    rng = np.random.default_rng(8)
    X = rng.normal(0, 3, (500, 3))
    with _child() as t:
        t.start()
        got = np.array([e.log_density for e in t.evaluate_batch(X)])
    expected = np.array([quadratic(x) for x in X])
    err = float(np.max(np.abs(got - expected) / np.maximum(1.0, np.abs(expected))))
    record_property("detail", f"max deviation {err:.1e}")
    assert err <= 1e-12


@pytest.mark.criterion(8, "subprocess protocol: handshake, 500 evaluations, nan path, timeout path")
def test_subprocess_handshake_failures():
    with pytest.raises(TargetError):
        _child("badhello").start()
    with pytest.raises(TargetError):
        SubprocessTarget([sys.executable, CHILD, "2"], dim=3).start()


@pytest.mark.criterion(8, "subprocess protocol: handshake, 500 evaluations, nan path, timeout path")
def test_subprocess_nan_path():
    with _child("nan", dim=1) as t:
        assert t.evaluate([-2.0]).log_density == -2.0
        assert t.evaluate([2.0]).failed


@pytest.mark.criterion(8, "subprocess protocol: handshake, 500 evaluations, nan path, timeout path")
def test_subprocess_timeout_path(record_property):
    t = _child("sleep", dim=1, timeout=1.0)
    t.start()
    start = time.monotonic()
    with pytest.raises(TargetError, match="timed out"):
        t.evaluate([0.0])
    elapsed = time.monotonic() - start
    record_property("detail", f"timeout raised after {elapsed:.2f} s")
    assert elapsed <= 1.0 + 1.0
    t.close()
