"""Active sampling: acquisition functions and greedy batch search."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import SearchError
from .gp import GpSurrogate
from .posterior import VariationalPosterior

__all__ = [
    "AcquisitionKind",
    "SearchBox",
    "SearchOptions",
    "acq_prospective",
    "acq_noisy_integrated",
    "noise_model",
    "search_next",
    "integrated_variance",
]


class AcquisitionKind(enum.Enum):
    PROSPECTIVE = "prospective"
    NOISY_INTEGRATED = "noisy-integrated"

    @classmethod
    def for_data(cls, s, forced_noisy: bool | None = None) -> "AcquisitionKind":
        """Noisy variant when any observation reports noise, unless forced."""
        noisy = bool(np.any(np.asarray(s) > 0)) if forced_noisy is None else forced_noisy
        return cls.NOISY_INTEGRATED if noisy else cls.PROSPECTIVE


def acq_prospective(x, gp: GpSurrogate, vp: VariationalPosterior) -> np.ndarray:
    """``V(x) q(x) exp(m(x) - max y)`` for one point or a Q x D batch."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    mean, var = gp.predict(X)
    with np.errstate(divide="ignore"):
        log_a = np.log(var) + vp.log_pdf(X) + mean - np.max(gp.data.y)
    out = np.exp(np.minimum(log_a, 700.0))
    out[var <= 0] = 0.0
    out[~np.isfinite(out)] = 0.0
    return float(out[0]) if single else out


def noise_model(gp: GpSurrogate):
    """Estimated observation noise variance at new points.

    Noise floor plus the squared reported noise of the nearest training point.
    """
    X, s = gp.data.X, gp.data.s
    floor2 = gp.hyper.noise_floor**2
    ell = gp.hyper.lengthscales

    def s2(Q):
        Q = np.atleast_2d(Q)
        if not np.any(s > 0):
            return np.full(Q.shape[0], floor2)
        d2 = np.sum(((Q[:, None, :] - X[None, :, :]) / ell) ** 2, axis=2)
        return floor2 + s[np.argmin(d2, axis=1)] ** 2

    return s2


def acq_noisy_integrated(x, gp: GpSurrogate, vp: VariationalPosterior, n_mc: int = 128, seed=None,
                         reference=None, noise_var=None) -> np.ndarray:
    """Expected reduction of predictive variance integrated over ``q``.

    For a reference set ``z_j ~ q`` (drawn with ``seed`` unless given as
    ``reference``) the score of ``x`` is
    ``mean_j cov(z_j, x)^2 / (V(x) + s_est^2(x))``. ``noise_var`` overrides
    the noise model with a scalar or a callable of the query points.
    """
    if n_mc < 8 and reference is None:
        raise ValueError("n_mc must be at least 8")
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    Z = vp.sample(n_mc, seed) if reference is None else np.atleast_2d(reference)
    if noise_var is None:
        s2 = noise_model(gp)(X)
    elif callable(noise_var):
        s2 = np.asarray(noise_var(X), dtype=float)
    else:
        s2 = np.full(X.shape[0], float(noise_var))
    cov = gp.posterior_cov(Z, X)                          # J x Q
    _, var = gp.predict(X)
    denom = var + s2
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.mean(cov**2, axis=0) / denom
    out[~np.isfinite(out) | (denom <= 0)] = 0.0
    out = np.maximum(out, 0.0)
    return float(out[0]) if single else out


@dataclass(frozen=True)
class SearchBox:
    """Where uniform candidates come from and which points are admissible.

    Uniform candidates are drawn in the box ``[lower, upper]`` and mapped by
    ``u -> A u + b`` into the current coordinates. ``valid`` maps an array of
    current-coordinate points to a boolean mask.
    """

    lower: np.ndarray
    upper: np.ndarray
    A: np.ndarray | None = None
    b: np.ndarray | None = None
    valid: object = None

    def uniform(self, n, rng):
        U = self.lower + (self.upper - self.lower) * rng.random((n, self.lower.size))
        if self.A is not None:
            U = U @ self.A.T
        if self.b is not None:
            U = U + self.b
        return U

    def admissible(self, Z):
        Z = np.atleast_2d(Z)
        ok = np.all(np.isfinite(Z), axis=1)
        if self.valid is not None:
            ok &= np.asarray(self.valid(Z), dtype=bool)
        return ok

    @property
    def scale(self) -> float:
        width = self.upper - self.lower
        if self.A is not None:
            width = np.abs(self.A) @ width
        return float(np.max(width))


@dataclass(frozen=True)
class SearchOptions:
    n_vp_candidates: int = 2**10
    n_uniform_candidates: int = 2**8
    polish_steps: int = 50
    n_reference: int = 128
    kind: AcquisitionKind | None = None


def _pattern_search(f, x0, f0, step, steps, admissible):
    """Compass search maximizing ``f`` from ``x0``."""
    x, fx = x0.copy(), f0
    step = step.copy()
    D = x.size
    for _ in range(steps):
        trials = np.repeat(x[None, :], 2 * D, axis=0)
        idx = np.arange(D)
        trials[idx, idx] += step
        trials[D + idx, idx] -= step
        ok = admissible(trials)
        vals = np.full(2 * D, -np.inf)
        if ok.any():
            vals[ok] = f(trials[ok])
        j = int(np.argmax(vals))
        if vals[j] > fx:
            x, fx = trials[j], vals[j]
        else:
            step *= 0.5
            if np.all(step < 1e-10):
                break
    return x, fx


def search_next(gp: GpSurrogate, vp: VariationalPosterior, count: int, bounds: SearchBox,
                opts: SearchOptions | None = None, seed=None) -> np.ndarray:
    """Greedy batch of ``count`` points maximizing the acquisition.

    After each pick the surrogate is conditioned on its own predicted mean
    at the new point so the remaining picks spread out.

    Raises
    ------
    SearchError
        If no candidate has a finite, admissible score.
    """
    if count < 1:
        raise ValueError("count must be at least 1")
    opts = opts or SearchOptions()
    kind = opts.kind or AcquisitionKind.for_data(gp.data.s)
    rng = np.random.default_rng(seed)
    reference = vp.sample(opts.n_reference, rng)
    s2_model = noise_model(gp)
    _, vp_cov = vp.moments()
    step0 = 0.1 * np.sqrt(np.diag(vp_cov))
    min_sep = 1e-6 * bounds.scale

    if kind is AcquisitionKind.PROSPECTIVE:
        def score(g, Z):
            return acq_prospective(Z, g, vp)
    else:
        def score(g, Z):
            return acq_noisy_integrated(Z, g, vp, reference=reference, noise_var=s2_model)

    chosen = []
    g = gp
    for _ in range(count):
        C = np.vstack([vp.sample(opts.n_vp_candidates, rng), bounds.uniform(opts.n_uniform_candidates, rng)])

        def admissible(Z):
            ok = bounds.admissible(Z)
            for c in chosen:
                ok &= np.max(np.abs(Z - c), axis=1) > min_sep
            return ok

        ok = admissible(C)
        C = C[ok]
        vals = score(g, C) if C.shape[0] else np.empty(0)
        finite = np.isfinite(vals)
        if not finite.any():
            raise SearchError("no admissible candidate with a finite acquisition value")
        C, vals = C[finite], vals[finite]
        j = int(np.argmax(vals))
        x, _ = _pattern_search(lambda Z: score(g, Z), C[j], vals[j], step0, opts.polish_steps, admissible)
        chosen.append(x)
        mean, _ = g.predict(x[None, :])
        s_new = 0.0
        if kind is AcquisitionKind.NOISY_INTEGRATED:
            s_new = float(np.sqrt(max(s2_model(x[None, :])[0] - g.hyper.noise_floor**2, 0.0)))
        g = g.condition_on(x[None, :], mean, s_new)
    return np.array(chosen)


def integrated_variance(gp: GpSurrogate, reference) -> float:
    """Mean predictive variance over a fixed reference set."""
    _, var = gp.predict(reference)
    return float(np.mean(var))

