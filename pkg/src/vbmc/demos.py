"""Small built-in targets used by the CLI demo configs and the test suite."""

from __future__ import annotations

import math

import numpy as np
from scipy.stats import multivariate_normal

__all__ = ["ConjugateGaussian", "rosenbrock_log_joint", "quadratic", "DEMOS"]


class ConjugateGaussian:
    """Gaussian likelihood times Gaussian prior, with closed-form evidence.

    The log joint is ``log N(mu_lik; x, S_lik) + log N(x; 0, prior_sd^2 I)``
    so the evidence is ``N(mu_lik; 0, S_lik + prior_sd^2 I)``.
    """

    def __init__(self, mu_lik, cov_lik, prior_sd: float = 1.0, noise_sd: float = 0.0, seed=None):
        self.mu = np.atleast_1d(np.asarray(mu_lik, dtype=float))
        self.cov = np.atleast_2d(np.asarray(cov_lik, dtype=float))
        self.dim = self.mu.size
        self.prior_sd = float(prior_sd)
        self.noise_sd = float(noise_sd)
        self._rng = np.random.default_rng(seed)
        self._lik = multivariate_normal(self.mu, self.cov)
        self._prior = multivariate_normal(np.zeros(self.dim), self.prior_sd**2 * np.eye(self.dim))

    @classmethod
    def rotated(cls, dim: int, seed: int = 0, **kwargs) -> "ConjugateGaussian":
        """Likelihood with a random rotation and sds spread over [0.3, 1]."""
        rng = np.random.default_rng(seed)
        Q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
        cov = Q @ np.diag(np.linspace(0.3, 1.0, dim) ** 2) @ Q.T
        return cls(np.linspace(-0.5, 1.0, dim), cov, **kwargs)

    @property
    def log_evidence(self) -> float:
        total = self.cov + self.prior_sd**2 * np.eye(self.dim)
        return float(multivariate_normal(np.zeros(self.dim), total).logpdf(self.mu))

    @property
    def posterior_moments(self):
        P = np.linalg.inv(self.cov) + np.eye(self.dim) / self.prior_sd**2
        cov = np.linalg.inv(P)
        return cov @ np.linalg.solve(self.cov, self.mu), cov

    def exact(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(self._lik.logpdf(x) + self._prior.logpdf(x))

    def __call__(self, x):
        value = self.exact(x)
        if self.noise_sd > 0:
            return value + self.noise_sd * self._rng.standard_normal(), self.noise_sd
        return value


def rosenbrock_log_joint(x) -> float:
    """Banana-shaped log likelihood plus a standard normal log prior (D=2)."""
    x1, x2 = float(x[0]), float(x[1])
    log_lik = -((x2 - x1**2) ** 2) / (2 * 0.25) - (x1 - 1.0) ** 2 / 2
    log_prior = -0.5 * (x1**2 + x2**2) - math.log(2 * math.pi)
    return log_lik + log_prior


def quadratic(x) -> float:
    """``-|x|^2 / 2``."""
    x = np.asarray(x, dtype=float)
    return float(-0.5 * x @ x)


def _gaussian_demo(dim):
    return ConjugateGaussian(np.full(dim, 0.5), 0.25 * np.eye(dim))


DEMOS = {
    "gaussian": _gaussian_demo,
    "rosenbrock": lambda dim: rosenbrock_log_joint,
    "quadratic": lambda dim: quadratic,
}
