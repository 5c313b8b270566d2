"""Gaussian-process surrogate of the log joint density.

The prior is ``f ~ GP(m, k)`` with a squared-exponential kernel

    k(x, x') = sf^2 exp(-1/2 sum_d (x_d - x'_d)^2 / ell_d^2)

and a negative quadratic mean

    m(x) = m0 - 1/2 sum_d (x_d - xm_d)^2 / omega_d^2

so that ``exp(f)`` stays integrable away from the data. Observation ``n`` has
noise variance ``noise_floor^2 + s_n^2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.optimize import minimize

from .errors import FitError, NumericalError

__all__ = [
    "GpHyperparams",
    "TrainingSet",
    "GpSurrogate",
    "HyperPrior",
    "kernel",
    "kernel_matrix",
    "log_marginal_likelihood",
    "fit_hyperparams",
]

LOG2PI = math.log(2.0 * math.pi)
JITTER_LADDER = (1e-10, 1e-9, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4)


@dataclass(frozen=True, eq=False)
class GpHyperparams:
    """Kernel, noise and mean-function parameters, all on unconstrained scales."""

    log_lengthscales: np.ndarray
    log_outputscale: float
    log_noise_floor: float
    m0: float
    x_m: np.ndarray
    log_omega: np.ndarray

    def __post_init__(self):
        for name in ("log_lengthscales", "x_m", "log_omega"):
            arr = np.atleast_1d(np.asarray(getattr(self, name), dtype=float)).copy()
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "log_outputscale", float(self.log_outputscale))
        object.__setattr__(self, "log_noise_floor", float(self.log_noise_floor))
        object.__setattr__(self, "m0", float(self.m0))
        d = self.log_lengthscales.size
        if self.x_m.size != d or self.log_omega.size != d:
            raise ValueError("x_m and log_omega must match the lengthscale dimension")

    @property
    def dim(self) -> int:
        return self.log_lengthscales.size

    @property
    def lengthscales(self) -> np.ndarray:
        return np.exp(self.log_lengthscales)

    @property
    def outputscale(self) -> float:
        return math.exp(self.log_outputscale)

    @property
    def noise_floor(self) -> float:
        return math.exp(self.log_noise_floor)

    @property
    def omega(self) -> np.ndarray:
        return np.exp(self.log_omega)

    def to_vector(self) -> np.ndarray:
        """Flatten as ``[log_ell (D), log_sf, log_noise, m0, x_m (D), log_omega (D)]``."""
        return np.concatenate(
            [
                self.log_lengthscales,
                [self.log_outputscale, self.log_noise_floor, self.m0],
                self.x_m,
                self.log_omega,
            ]
        )

    @classmethod
    def from_vector(cls, theta, dim: int) -> "GpHyperparams":
        theta = np.asarray(theta, dtype=float)
        if theta.size != 3 * dim + 3:
            raise ValueError(f"expected {3 * dim + 3} hyperparameters, got {theta.size}")
        return cls(
            log_lengthscales=theta[:dim],
            log_outputscale=theta[dim],
            log_noise_floor=theta[dim + 1],
            m0=theta[dim + 2],
            x_m=theta[dim + 3 : 2 * dim + 3],
            log_omega=theta[2 * dim + 3 :],
        )

    def mean_function(self, X) -> np.ndarray:
        X = np.atleast_2d(X)
        z = (X - self.x_m) / self.omega
        return self.m0 - 0.5 * np.sum(z * z, axis=1)


@dataclass(frozen=True, eq=False)
class TrainingSet:
    """Observed inference-space points, log-joint values and noise sds."""

    X: np.ndarray
    y: np.ndarray
    s: np.ndarray = None

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=float)).copy()
        y = np.atleast_1d(np.asarray(self.y, dtype=float)).copy()
        s = np.zeros(y.size) if self.s is None else np.atleast_1d(np.asarray(self.s, dtype=float)).copy()
        if X.shape[0] < 1 or X.shape[0] != y.size or s.size != y.size:
            raise ValueError(f"inconsistent training set shapes {X.shape}, {y.shape}, {s.shape}")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y)) and np.all(np.isfinite(s))):
            raise ValueError("training set entries must be finite")
        if np.any(s < 0):
            raise ValueError("noise standard deviations must be non-negative")
        for arr in (X, y, s):
            arr.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "s", s)

    @property
    def n(self) -> int:
        return self.y.size

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def append(self, X, y, s=None) -> "TrainingSet":
        X = np.atleast_2d(X)
        y = np.atleast_1d(y)
        s = np.zeros(y.size) if s is None else np.atleast_1d(s)
        return TrainingSet(np.vstack([self.X, X]), np.concatenate([self.y, y]), np.concatenate([self.s, s]))


def kernel(x1, x2, hyper: GpHyperparams) -> float:
    """Squared-exponential covariance between two single points."""
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    r = (x1 - x2) / hyper.lengthscales
    return hyper.outputscale**2 * math.exp(-0.5 * float(r @ r))


def _sq_dist(A, B, ell):
    A = A / ell
    B = B / ell
    d2 = np.sum(A * A, 1)[:, None] + np.sum(B * B, 1)[None, :] - 2.0 * A @ B.T
    return np.maximum(d2, 0.0)


def kernel_matrix(A, B, hyper: GpHyperparams) -> np.ndarray:
    A = np.atleast_2d(A)
    B = np.atleast_2d(B)
    return hyper.outputscale**2 * np.exp(-0.5 * _sq_dist(A, B, hyper.lengthscales))


def _noise_var(hyper, data):
    return hyper.noise_floor**2 + data.s**2


def _factor(hyper, data, K=None):
    """Cholesky of ``K + noise + jitter`` walking up the jitter ladder.

    Returns ``(L, jitter_level)`` where the absolute jitter is
    ``jitter_level * mean(diag)``.
    """
    if K is None:
        K = kernel_matrix(data.X, data.X, hyper)
    Ky = K + np.diag(_noise_var(hyper, data))
    scale = float(np.mean(np.diag(Ky)))
    for level in JITTER_LADDER:
        try:
            L = np.linalg.cholesky(Ky + level * scale * np.eye(data.n))
        except np.linalg.LinAlgError:
            continue
        if np.all(np.isfinite(L)):
            return L, level
    raise NumericalError("covariance not positive definite after maximal jitter")


def log_marginal_likelihood(hyper: GpHyperparams, data: TrainingSet):
    """Log evidence of ``data.y`` under the GP and its gradient.

    The gradient is taken with respect to ``hyper.to_vector()``. The jitter
    added for stability is proportional to the mean diagonal and is
    differentiated along with it.
    """
    D = data.dim
    X, y = data.X, data.y
    ell = hyper.lengthscales
    sf2 = hyper.outputscale**2
    noise2 = hyper.noise_floor**2

    K = kernel_matrix(X, X, hyper)
    L, level = _factor(hyper, data, K)
    r = y - hyper.mean_function(X)
    alpha = cho_solve((L, True), r)
    n = data.n
    value = -0.5 * float(r @ alpha) - float(np.sum(np.log(np.diag(L)))) - 0.5 * n * LOG2PI

    Kinv = cho_solve((L, True), np.eye(n))
    W = np.outer(alpha, alpha) - Kinv
    grad = np.zeros(3 * D + 3)
    for d in range(D):
        diff2 = (X[:, d][:, None] - X[:, d][None, :]) ** 2 / ell[d] ** 2
        grad[d] = 0.5 * np.sum(W * K * diff2)
    trW = float(np.trace(W))
    # jitter = level * (sf2 + mean(noise2 + s^2))
    grad[D] = 0.5 * (2.0 * np.sum(W * K) + trW * level * 2.0 * sf2)
    grad[D + 1] = 0.5 * trW * 2.0 * noise2 * (1.0 + level)

    om2 = hyper.omega**2
    dx = X - hyper.x_m
    grad[D + 2] = float(np.sum(alpha))
    grad[D + 3 : 2 * D + 3] = alpha @ (dx / om2)
    grad[2 * D + 3 :] = alpha @ (dx**2 / om2)
    return value, grad


@dataclass(frozen=True)
class HyperPrior:
    """Independent Gaussian hyperpriors plus box limits for the optimizer.

    ``center`` and ``width`` describe the plausible region in the current
    inference coordinates.
    """

    mean: np.ndarray
    sd: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    @classmethod
    def from_data(cls, data: TrainingSet, center, width) -> "HyperPrior":
        D = data.dim
        center = np.asarray(center, dtype=float)
        width = np.asarray(width, dtype=float)
        y = data.y
        sd_y = max(float(np.std(y)), 1.0)
        ln10 = math.log(10.0)

        mean = np.concatenate(
            [
                np.log(width / math.sqrt(10.0)),
                [math.log(sd_y), math.log(1e-3), float(np.max(y))],
                center,
                np.log(width),
            ]
        )
        sd = np.concatenate(
            [
                np.full(D, ln10),
                [ln10, 1.0, 2.0 * sd_y + 5.0],
                width,
                np.full(D, ln10),
            ]
        )
        lower = np.concatenate(
            [
                np.log(width * 1e-3),
                [math.log(1e-3), math.log(1e-5), -np.inf],
                center - 10.0 * width,
                np.log(width * 1e-3),
            ]
        )
        upper = np.concatenate(
            [
                np.log(width * 1e2),
                [math.log(1e3 * sd_y), math.log(1e2 * sd_y), np.inf],
                center + 10.0 * width,
                np.log(width * 1e3),
            ]
        )
        return cls(mean, sd, lower, upper)

    def log_density(self, theta):
        z = (theta - self.mean) / self.sd
        value = -0.5 * float(z @ z) - float(np.sum(np.log(self.sd))) - 0.5 * z.size * LOG2PI
        return value, -z / self.sd

    def clip(self, theta):
        eps = 1e-9
        return np.clip(theta, self.lower + eps, self.upper - eps)


def _box_from_space(space):
    """Return ``(center, width)`` of the plausible box in inference coordinates."""
    if hasattr(space, "plausible_box_unbounded"):
        lo, hi = space.plausible_box_unbounded()
    else:
        lo, hi = (np.asarray(a, dtype=float) for a in space)
    return 0.5 * (lo + hi), hi - lo


def _default_start(data: TrainingSet, prior: HyperPrior) -> np.ndarray:
    D = data.dim
    theta = prior.mean.copy()
    best = int(np.argmax(data.y))
    theta[D + 3 : 2 * D + 3] = data.X[best]
    spread = np.std(data.X, axis=0)
    spread = np.where(spread > 0, spread, np.exp(prior.mean[2 * D + 3 :]))
    theta[2 * D + 3 :] = np.log(spread)
    return prior.clip(theta)


def fit_hyperparams(data: TrainingSet, space, prev: GpHyperparams | None = None,
                    n_restarts: int = 3, maxiter: int = 500, seed: int = 0) -> GpHyperparams:
    """MAP estimate of the GP hyperparameters.

    ``space`` is a :class:`~vbmc.space.BoundedSpace` or a
    ``(plausible_lower, plausible_upper)`` pair in the current inference
    coordinates; it sets the hyperprior scales. Restart 0 starts from ``prev``
    when given (otherwise from a data-driven default); the remaining restarts
    perturb that start. The best finite objective wins, lowest restart index
    on ties.

    Raises
    ------
    FitError
        If no restart produces a finite objective.
    """
    D = data.dim
    center, width = _box_from_space(space)
    prior = HyperPrior.from_data(data, center, width)
    rng = np.random.default_rng(seed)

    def objective(theta):
        try:
            hyper = GpHyperparams.from_vector(theta, D)
            lml, g = log_marginal_likelihood(hyper, data)
        except NumericalError:
            return np.inf, np.zeros_like(theta)
        lp, gp = prior.log_density(theta)
        val = -(lml + lp)
        if not np.isfinite(val):
            return np.inf, np.zeros_like(theta)
        return val, -(g + gp)

    base = prior.clip(prev.to_vector()) if prev is not None else _default_start(data, prior)
    starts = [base]
    perturb_sd = np.concatenate([np.full(D + 2, 0.5), [0.5 * prior.sd[D + 2]], 0.1 * width, np.full(D, 0.5)])
    for _ in range(max(n_restarts, 1) - 1):
        starts.append(prior.clip(base + perturb_sd * rng.standard_normal(base.size)))

    bounds = list(zip(np.where(np.isfinite(prior.lower), prior.lower, None),
                      np.where(np.isfinite(prior.upper), prior.upper, None)))
    best_theta, best_val = None, np.inf
    for theta0 in starts:
        f0, _ = objective(theta0)
        try:
            res = minimize(objective, theta0, jac=True, method="L-BFGS-B", bounds=bounds,
                           options={"maxiter": maxiter})
            theta, val = res.x, res.fun
        except (ValueError, FloatingPointError):
            theta, val = theta0, f0
        if not np.isfinite(val) or val > f0:
            theta, val = theta0, f0
        if np.isfinite(val) and val < best_val:
            best_theta, best_val = theta, val
    if best_theta is None:
        raise FitError("all GP hyperparameter restarts produced non-finite objectives")
    return GpHyperparams.from_vector(best_theta, D)


def log_posterior_objective(hyper: GpHyperparams, data: TrainingSet, space) -> float:
    """Log marginal likelihood plus log hyperprior, as maximized by the fit."""
    center, width = _box_from_space(space)
    prior = HyperPrior.from_data(data, center, width)
    lml, _ = log_marginal_likelihood(hyper, data)
    lp, _ = prior.log_density(hyper.to_vector())
    return lml + lp


@dataclass(frozen=True, eq=False)
class GpSurrogate:
    """GP posterior given fixed hyperparameters and training data."""

    hyper: GpHyperparams
    data: TrainingSet
    L: np.ndarray = field(init=False, repr=False)
    alpha: np.ndarray = field(init=False, repr=False)
    jitter: float = field(init=False)

    def __post_init__(self):
        L, level = _factor(self.hyper, self.data)
        Ky_diag_mean = self.hyper.outputscale**2 + float(np.mean(_noise_var(self.hyper, self.data)))
        r = self.data.y - self.hyper.mean_function(self.data.X)
        alpha = cho_solve((L, True), r)
        L.setflags(write=False)
        alpha.setflags(write=False)
        object.__setattr__(self, "L", L)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "jitter", level * Ky_diag_mean)

    @property
    def dim(self) -> int:
        return self.data.dim

    def solve(self, B) -> np.ndarray:
        """``(K + noise + jitter)^{-1} B``."""
        return cho_solve((self.L, True), B)

    def predict(self, Xq):
        """Posterior mean and latent variance at query points ``Xq`` (Q x D)."""
        Xq = np.atleast_2d(np.asarray(Xq, dtype=float))
        Ks = kernel_matrix(Xq, self.data.X, self.hyper)
        mean = self.hyper.mean_function(Xq) + Ks @ self.alpha
        v = solve_triangular(self.L, Ks.T, lower=True)
        var = self.hyper.outputscale**2 - np.sum(v * v, axis=0)
        return mean, np.maximum(var, 0.0)

    def posterior_cov(self, A, B) -> np.ndarray:
        """Posterior covariance matrix of the latent function between ``A`` and ``B``."""
        Ka = kernel_matrix(A, self.data.X, self.hyper)
        Kb = kernel_matrix(B, self.data.X, self.hyper)
        va = solve_triangular(self.L, Ka.T, lower=True)
        vb = solve_triangular(self.L, Kb.T, lower=True)
        return kernel_matrix(A, B, self.hyper) - va.T @ vb

    def condition_on(self, x, y, s=0.0) -> "GpSurrogate":
        """Copy of the surrogate with extra observations, hyperparameters fixed."""
        return GpSurrogate(self.hyper, self.data.append(x, y, s))
