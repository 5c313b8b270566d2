"""Mixture-of-Gaussians variational posterior.

Component ``k`` is ``N(mu_k, diag((sigma_k * lambda)^2))``: every component
has its own scalar scale ``sigma_k`` and all components share the
per-dimension scale vector ``lambda``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp, softmax

from .space import BoundedSpace

__all__ = [
    "VariationalPosterior",
    "TransformedPosterior",
    "divergence_between",
]

LOG2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True, eq=False)
class VariationalPosterior:
    weights: np.ndarray
    means: np.ndarray
    sigma: np.ndarray
    lam: np.ndarray

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=float)).copy()
        mu = np.atleast_2d(np.asarray(self.means, dtype=float)).copy()
        sigma = np.atleast_1d(np.asarray(self.sigma, dtype=float)).copy()
        lam = np.atleast_1d(np.asarray(self.lam, dtype=float)).copy()
        K, D = mu.shape
        if w.size != K or sigma.size != K or lam.size != D:
            raise ValueError(
                f"inconsistent shapes: weights {w.shape}, means {mu.shape}, "
                f"sigma {sigma.shape}, lambda {lam.shape}"
            )
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("weights must be non-negative and sum to one")
        w = w / w.sum()
        if not (np.all(sigma > 0) and np.all(lam > 0)):
            raise ValueError("sigma and lambda must be strictly positive")
        for arr in (w, mu, sigma, lam):
            if not np.all(np.isfinite(arr)):
                raise ValueError("variational parameters must be finite")
            arr.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "lam", lam)

    @property
    def K(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def scales(self) -> np.ndarray:
        """K x D matrix of per-component marginal standard deviations."""
        return self.sigma[:, None] * self.lam[None, :]

    # -- unconstrained parameterization ------------------------------------

    def to_unconstrained(self) -> np.ndarray:
        """``[means (K*D), log sigma (K), log lambda (D), log weights (K)]``."""
        return np.concatenate(
            [self.means.ravel(), np.log(self.sigma), np.log(self.lam), np.log(self.weights)]
        )

    @classmethod
    def from_unconstrained(cls, theta, K: int, D: int) -> "VariationalPosterior":
        theta = np.asarray(theta, dtype=float)
        mu = theta[: K * D].reshape(K, D)
        log_sigma = theta[K * D : K * D + K]
        log_lam = theta[K * D + K : K * D + K + D]
        logits = theta[K * D + K + D :]
        return cls(softmax(logits), mu, np.exp(log_sigma), np.exp(log_lam))

    # -- density -------------------------------------------------------------

    def component_log_pdf(self, X) -> np.ndarray:
        """N x K matrix of ``log N(x_n; mu_k, diag(s_k^2))``."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        S = self.scales
        z = (X[:, None, :] - self.means[None, :, :]) / S[None, :, :]
        return (
            -0.5 * np.sum(z * z, axis=2)
            - np.sum(np.log(S), axis=1)[None, :]
            - 0.5 * self.dim * LOG2PI
        )

    def log_pdf(self, x):
        """Mixture log density at one point (D,) or many points (N x D)."""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        with np.errstate(divide="ignore"):
            logw = np.log(self.weights)
        out = logsumexp(self.component_log_pdf(x) + logw[None, :], axis=1)
        # Far tails underflow to -inf; keep them finite.
        out = np.maximum(out, -1e300)
        return float(out[0]) if single else out

    def sample(self, n: int, seed=None) -> np.ndarray:
        """Draw ``n`` i.i.d. points: component by weight, then Gaussian."""
        rng = np.random.default_rng(seed)
        comp = rng.choice(self.K, size=n, p=self.weights)
        eps = rng.standard_normal((n, self.dim))
        return self.means[comp] + self.scales[comp] * eps

    def moments(self):
        """Exact mixture mean and covariance."""
        w = self.weights
        mean = w @ self.means
        second = np.einsum("k,kd,ke->de", w, self.means, self.means)
        second += np.diag(w @ (self.scales**2))
        cov = second - np.outer(mean, mean)
        return mean, 0.5 * (cov + cov.T)

    # -- structural edits ------------------------------------------------------

    def prune(self, threshold: float = 1e-8) -> "VariationalPosterior":
        """Drop components whose weight is below ``threshold`` and renormalize."""
        keep = self.weights >= threshold
        if keep.all():
            return self
        if not keep.any():
            keep = self.weights == self.weights.max()
        w = self.weights[keep]
        return VariationalPosterior(w / w.sum(), self.means[keep], self.sigma[keep], self.lam)

    def affine(self, A, b) -> "VariationalPosterior":
        """Push the posterior through ``z -> A z + b``.

        Means and per-coordinate marginal variances are mapped exactly.
        Off-diagonal covariance created by a non-diagonal ``A`` is dropped, so
        the map is exact only for diagonal or signed-permutation ``A``.
        """
        A = np.asarray(A, dtype=float)
        means = self.means @ A.T + np.asarray(b, dtype=float)
        # diag(A diag(sigma_k^2 lam^2) A^T) = sigma_k^2 * (A^2 @ lam^2)
        lam = np.sqrt((A**2) @ (self.lam**2))
        return VariationalPosterior(self.weights, means, self.sigma, lam)


def divergence_between(vp_a: VariationalPosterior, vp_b: VariationalPosterior,
                       n: int = 2000, seed=None, return_se: bool = False):
    """Symmetrized Monte Carlo KL, ``(KL(a||b) + KL(b||a)) / 2``.

    Uses ``n`` samples from each posterior. With ``return_se`` the standard
    error of the estimate is returned as well.
    """
    rng = np.random.default_rng(seed)
    xa = vp_a.sample(n, rng)
    xb = vp_b.sample(n, rng)
    ra = vp_a.log_pdf(xa) - vp_b.log_pdf(xa)
    rb = vp_b.log_pdf(xb) - vp_a.log_pdf(xb)
    est = 0.5 * (float(np.mean(ra)) + float(np.mean(rb)))
    se = 0.5 * math.sqrt((np.var(ra) + np.var(rb)) / n)
    return (est, se) if return_se else est


class TransformedPosterior:
    """A variational posterior living in whitened inference coordinates.

    Inference coordinates are ``u = space.to_unbounded(x)``; the posterior is
    expressed in ``z = A u + b``.
    """

    def __init__(self, vp: VariationalPosterior, space: BoundedSpace, A=None, b=None):
        D = space.dim
        self.vp = vp
        self.space = space
        self.A = np.eye(D) if A is None else np.asarray(A, dtype=float)
        self.b = np.zeros(D) if b is None else np.asarray(b, dtype=float)
        self._A_inv = np.linalg.inv(self.A)
        self._logdet_A = float(np.linalg.slogdet(self.A)[1])

    @property
    def dim(self) -> int:
        return self.space.dim

    def to_z(self, x) -> np.ndarray:
        return self.space.to_unbounded(x) @ self.A.T + self.b

    def from_z(self, z) -> np.ndarray:
        return self.space.to_original((np.asarray(z) - self.b) @ self._A_inv.T)

    def sample_u(self, n: int, seed=None) -> np.ndarray:
        return (self.vp.sample(n, seed) - self.b) @ self._A_inv.T

    def log_pdf_u(self, U) -> np.ndarray:
        return self.vp.log_pdf(np.atleast_2d(U) @ self.A.T + self.b) + self._logdet_A

    def sample(self, n: int, seed=None) -> np.ndarray:
        """Original-space samples."""
        return self.space.to_original(self.sample_u(n, seed))

    def log_pdf(self, x):
        """Log density in the original parameter space."""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        u = self.space.to_unbounded(np.atleast_2d(x))
        out = self.log_pdf_u(u) - self.space.log_abs_det_jacobian(u)
        return float(out[0]) if single else out

    def moments(self, n: int = 100_000, seed=0):
        """Original-space mean and covariance.

        Exact when no dimension is bounded; otherwise estimated from ``n``
        samples.
        """
        if not self.space.bounded.any():
            mean, cov = self.vp.moments()
            return self._A_inv @ (mean - self.b), self._A_inv @ cov @ self._A_inv.T
        X = self.sample(n, seed)
        return X.mean(axis=0), np.cov(X, rowvar=False).reshape(self.dim, self.dim)

    # -- plain-text persistence --------------------------------------------

    def dumps(self) -> str:
        def fmt(v):
            return " ".join(repr(float(t)) for t in np.ravel(v))

        lines = [
            "format = vbmc-posterior/1",
            f"dim = {self.dim}",
            f"K = {self.vp.K}",
            f"weights = {fmt(self.vp.weights)}",
        ]
        lines += [f"mean.{k} = {fmt(self.vp.means[k])}" for k in range(self.vp.K)]
        lines += [
            f"sigma = {fmt(self.vp.sigma)}",
            f"lambda = {fmt(self.vp.lam)}",
            f"lower = {fmt(self.space.lower)}",
            f"upper = {fmt(self.space.upper)}",
            f"plausible_lower = {fmt(self.space.plausible_lower)}",
            f"plausible_upper = {fmt(self.space.plausible_upper)}",
        ]
        lines += [f"affine.{d} = {fmt(self.A[d])}" for d in range(self.dim)]
        lines.append(f"offset = {fmt(self.b)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "TransformedPosterior":
        fields = {}
        for raw in text.splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ValueError(f"malformed line: {raw!r}")
            fields[key.strip()] = value.strip()
        if fields.get("format") != "vbmc-posterior/1":
            raise ValueError("not a serialized posterior (missing format header)")

        def vec(key):
            return np.array([float(t) for t in fields[key].split()])

        try:
            D, K = int(fields["dim"]), int(fields["K"])
            means = np.array([vec(f"mean.{k}") for k in range(K)])
            vp = VariationalPosterior(vec("weights"), means.reshape(K, D), vec("sigma"), vec("lambda"))
            space = BoundedSpace(vec("lower"), vec("upper"), vec("plausible_lower"), vec("plausible_upper"))
            A = np.array([vec(f"affine.{d}") for d in range(D)]).reshape(D, D)
            b = vec("offset")
        except KeyError as exc:
            raise ValueError(f"missing key {exc.args[0]!r}") from None
        return cls(vp, space, A, b)
