"""The outer inference loop.

Each iteration picks a batch of points by active sampling, evaluates the
target there, refits the GP surrogate, refits the variational posterior
(adapting its component count once warm-up is over), optionally whitens the
coordinates, and records convergence diagnostics.
"""

from __future__ import annotations

import logging
import math
import time
import warnings as _warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import qmc

from .acquisition import AcquisitionKind, SearchBox, SearchOptions, search_next
from .errors import DomainError, TargetError, WhiteningError
from .gp import GpHyperparams, GpSurrogate, TrainingSet, fit_hyperparams
from .posterior import TransformedPosterior, VariationalPosterior, divergence_between
from .quadrature import ElboEstimate, OptimizeOptions, adapt_components, elbo, optimize_vp
from .space import BoundedSpace
from .target import Evaluation, as_target

__all__ = [
    "Options",
    "IterationRecord",
    "InferenceResult",
    "EngineState",
    "initial_design",
    "reliability_index",
    "apply_whitening",
    "run",
]

log = logging.getLogger(__name__)

TOL_ELBO = 0.1
TOL_SD = 0.1
TOL_DIV = 0.01


@dataclass(frozen=True)
class Options:
    """Run settings. Every field has a default; ``max_evaluations=None``
    means ``50 * (D + 2)``."""

    max_evaluations: int | None = None
    init_design_size: int = 10
    points_per_iteration: int = 5
    entropy_samples_final: int = 2**14
    reliability_threshold: float = 1.0
    stable_iterations_required: int = 3
    K_max: int = 50
    seed: int = 0
    noisy: bool | None = None
    warmup_K: int = 2
    warmup_elbo_change: float = 1.0
    divergence_samples: int = 2000
    max_whitenings: int = 2
    whitening_condition: float = 10.0
    gp_restarts: int = 3
    vp_max_steps: int = 2000
    vp_restarts: int = 2
    search: SearchOptions = field(default_factory=SearchOptions)

    def resolved(self, dim: int) -> "Options":
        if self.max_evaluations is None:
            return replace(self, max_evaluations=50 * (dim + 2))
        return self

    def __post_init__(self):
        for name in ("init_design_size", "points_per_iteration", "K_max", "stable_iterations_required"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.max_evaluations is not None and self.max_evaluations < 1:
            raise ValueError("max_evaluations must be positive")


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    evaluations: int
    elbo: float
    elbo_sd: float
    divergence: float
    reliability_index: float
    K: int
    whitening_applied: bool
    warmup: bool
    wall_time: float = 0.0


@dataclass
class InferenceResult:
    vp: TransformedPosterior
    elbo: ElboEstimate
    converged: bool
    trace: list[IterationRecord]
    evaluations_used: int
    warnings: list[str]
    evaluations: list[Evaluation] = field(default_factory=list)
    wall_time: float = 0.0

    def sample(self, n: int, seed=None) -> np.ndarray:
        return self.vp.sample(n, seed)


@dataclass(frozen=True, eq=False)
class EngineState:
    """Everything the loop carries between iterations.

    Training inputs are kept in the unbounded space ``u`` together with
    ``y_u = log p(x(u)) + log|dx/du|``; the surrogate and the variational
    posterior live in whitened coordinates ``z = A u + b`` where the log
    joint is ``y_u - log|det A|``.
    """

    space: BoundedSpace
    A: np.ndarray
    b: np.ndarray
    U: np.ndarray
    y_u: np.ndarray
    s: np.ndarray
    vp: VariationalPosterior | None = None
    hyper: GpHyperparams | None = None
    whitenings: int = 0

    @property
    def logdet_A(self) -> float:
        return float(np.linalg.slogdet(self.A)[1])

    def training_set(self) -> TrainingSet:
        return TrainingSet(self.U @ self.A.T + self.b, self.y_u - self.logdet_A, self.s)

    def plausible_box(self):
        """Plausible box bounds in current coordinates (axis-aligned hull)."""
        lo, hi = self.space.plausible_box_unbounded()
        center = self.A @ (0.5 * (lo + hi)) + self.b
        half = 0.5 * np.abs(self.A) @ (hi - lo)
        return center - half, center + half

    def posterior(self) -> TransformedPosterior:
        return TransformedPosterior(self.vp, self.space, self.A, self.b)

    def search_box(self) -> SearchBox:
        lo, hi = self.space.plausible_box_unbounded()
        A_inv = np.linalg.inv(self.A)
        space, b = self.space, self.b

        def valid(Z):
            return space.is_interior(space.to_original((Z - b) @ A_inv.T))

        return SearchBox(lo, hi, self.A, self.b, valid)


def _seed(*parts) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def initial_design(space: BoundedSpace, x0=None, n: int = 10, seed=0) -> np.ndarray:
    """``n`` inference-space points: ``x0`` (if given) then a scrambled Sobol
    sequence filling the plausible box.

    Raises
    ------
    DomainError
        If ``x0`` is not strictly inside the hard bounds.
    """
    if n < 1:
        raise ValueError("n must be positive")
    rows = []
    if x0 is not None:
        x0 = np.asarray(x0, dtype=float).ravel()
        if x0.size != space.dim or not space.is_interior(x0):
            raise DomainError(f"x0 outside hard bounds: {x0}")
        rows.append(space.to_unbounded(x0))
    m = n - len(rows)
    if m > 0:
        sobol = qmc.Sobol(space.dim, scramble=True, seed=seed)
        unit = sobol.random_base2(max(int(math.ceil(math.log2(m))), 0))[:m]
        X = qmc.scale(unit, space.plausible_lower, space.plausible_upper)
        rows.extend(space.to_unbounded(X))
    return np.array(rows).reshape(n, space.dim)


def reliability_index(records, tol_elbo: float = TOL_ELBO, tol_sd: float = TOL_SD,
                      tol_div: float = TOL_DIV) -> float:
    """Convergence statistic from the last two records of a trace.

    The maximum of ``|delta elbo| / tol_elbo``, ``elbo_sd / tol_sd`` and
    ``divergence / tol_div``; values at or below 1 mean stable.
    """
    if len(records) < 2:
        raise ValueError("reliability_index needs at least two records")
    prev, cur = records[-2], records[-1]
    return _reliability(cur.elbo - prev.elbo, cur.elbo_sd, cur.divergence, tol_elbo, tol_sd, tol_div)


def _reliability(delta_elbo, elbo_sd, divergence, tol_elbo=TOL_ELBO, tol_sd=TOL_SD, tol_div=TOL_DIV):
    return float(max(abs(delta_elbo) / tol_elbo, elbo_sd / tol_sd, max(divergence, 0.0) / tol_div))


def apply_whitening(state: EngineState, max_condition: float = 1e10) -> EngineState:
    """Rotate and scale coordinates so the current posterior has identity covariance.

    The new coordinates are ``z' = W z`` with ``W`` the inverse symmetric
    square root of the posterior covariance. The GP hyperparameters are
    dropped since lengthscales do not carry over.

    Raises
    ------
    WhiteningError
        If the covariance is not positive definite or is too ill-conditioned.
    """
    _, cov = state.vp.moments()
    evals, evecs = np.linalg.eigh(cov)
    if not np.all(np.isfinite(evals)) or evals.min() <= 0 or evals.max() / evals.min() > max_condition:
        raise WhiteningError("posterior covariance cannot be whitened")
    W = (evecs / np.sqrt(evals)) @ evecs.T
    W = 0.5 * (W + W.T)
    return replace(
        state,
        A=W @ state.A,
        b=W @ state.b,
        vp=state.vp.affine(W, np.zeros(state.space.dim)),
        hyper=None,
        whitenings=state.whitenings + 1,
    )


class _USpaceView:
    """Adapter exposing a posterior's density and sampler in ``u`` coordinates."""

    def __init__(self, tp: TransformedPosterior):
        self.tp = tp

    def sample(self, n, seed=None):
        return self.tp.sample_u(n, seed)

    def log_pdf(self, U):
        return self.tp.log_pdf_u(U)


def _initial_vp(data: TrainingSet, K: int) -> VariationalPosterior:
    order = np.argsort(-data.y, kind="stable")
    spread = np.std(data.X, axis=0)
    spread = np.where(spread > 0, spread, 1.0)
    best = data.X[order[0]]
    means = np.array([best + 0.1 * spread * ((-1) ** k) * (k > 0) for k in range(K)])
    return VariationalPosterior(np.full(K, 1.0 / K), means, np.ones(K), 0.5 * spread)


class _Runner:
    def __init__(self, target, space: BoundedSpace, options: Options, x0):
        self.space = space
        self.opts = options.resolved(space.dim)
        self.target = as_target(target, space)
        self.x0 = x0
        self.trace: list[IterationRecord] = []
        self.warnings: list[str] = []
        self.evaluations: list[Evaluation] = []
        self.vp_opts = OptimizeOptions(
            max_steps=self.opts.vp_max_steps, n_restarts=self.opts.vp_restarts, K_max=self.opts.K_max
        )

    # -- helpers -------------------------------------------------------------

    def _evaluate(self, U, iteration):
        X = self.space.to_original(U)
        try:
            evals = self.target.evaluate_batch(X)
        except TargetError as exc:
            self.evaluations.extend(exc.partial)
            raise TargetError(
                f"target failed at iteration {iteration}, point {exc.point}: {exc}",
                point=exc.point, partial=exc.partial, trace=self.trace,
            ) from exc
        self.evaluations.extend(evals)
        return evals

    def _absorb(self, state: EngineState, U, evals, iteration) -> EngineState:
        y = np.array([e.log_density for e in evals], dtype=float)
        s = np.array([e.noise_sd or 0.0 for e in evals], dtype=float)
        y_u = y + self.space.log_abs_det_jacobian(U)
        bad = ~np.isfinite(y_u)
        if bad.any():
            finite = np.concatenate([state.y_u, y_u[~bad]])
            penalty = float(np.min(finite)) - 20.0
            y_u[bad] = penalty
            s[bad] = 0.0
            for row in U[bad]:
                msg = (f"iteration {iteration}: non-finite target value at "
                       f"{self.space.to_original(row)}; recorded as {penalty:.6g}")
                self.warnings.append(msg)
                log.warning(msg)
        return replace(state, U=np.vstack([state.U, U]), y_u=np.concatenate([state.y_u, y_u]),
                       s=np.concatenate([state.s, s]))

    def _fit_gp(self, state: EngineState, iteration: int):
        data = state.training_set()
        hyper = fit_hyperparams(data, state.plausible_box(), prev=state.hyper,
                                n_restarts=self.opts.gp_restarts, seed=_seed(self.opts.seed, iteration, 1))
        return replace(state, hyper=hyper), GpSurrogate(hyper, data)

    def _fit_vp(self, state: EngineState, gp, iteration: int, adapt: bool):
        opts = replace(self.vp_opts, seed=_seed(self.opts.seed, iteration, 2))
        init = state.vp if state.vp is not None else _initial_vp(gp.data, self.opts.warmup_K)
        K = init.K
        vp, _ = optimize_vp(gp, K, init, opts)
        if adapt:
            vp = adapt_components(vp, gp, replace(opts, seed=_seed(self.opts.seed, iteration, 3)))
        est = elbo(vp, gp, self.opts.entropy_samples_final, _seed(self.opts.seed, 4))
        return replace(state, vp=vp), est

    def _divergence(self, old: TransformedPosterior, new: TransformedPosterior, iteration):
        return divergence_between(_USpaceView(old), _USpaceView(new), self.opts.divergence_samples,
                                  _seed(self.opts.seed, iteration, 5))

    # -- main loop -------------------------------------------------------------

    def run(self) -> InferenceResult:
        t_start = time.monotonic()
        opts, space = self.opts, self.space
        D = space.dim
        n_init = min(opts.init_design_size, opts.max_evaluations)

        U0 = initial_design(space, self.x0, n_init, _seed(opts.seed, 0, 0))
        evals = self._evaluate(U0, 0)
        failed = [e for e in evals if e.failed]
        if failed:
            raise TargetError(f"non-finite target value in the initial design at {failed[0].x}",
                              point=failed[0].x, partial=evals)
        state = EngineState(space, np.eye(D), np.zeros(D), np.empty((0, D)), np.empty(0), np.empty(0))
        state = self._absorb(state, U0, evals, 0)

        state, gp = self._fit_gp(state, 0)
        state, est = self._fit_vp(state, gp, 0, adapt=False)
        used = n_init
        warmup = True
        stable = 0
        converged = False
        prev_elbo = est.elbo
        prev_tp = state.posterior()
        iteration = 0

        while used + opts.points_per_iteration <= opts.max_evaluations:
            iteration += 1
            t_iter = time.monotonic()
            search_opts = opts.search
            if opts.noisy is not None:
                search_opts = replace(search_opts, kind=AcquisitionKind.for_data(state.s, opts.noisy))
            Z = search_next(gp, state.vp, opts.points_per_iteration, state.search_box(), search_opts,
                            _seed(opts.seed, iteration, 6))
            U = (Z - state.b) @ np.linalg.inv(state.A).T
            evals = self._evaluate(U, iteration)
            state = self._absorb(state, U, evals, iteration)
            used += len(evals)

            state, gp = self._fit_gp(state, iteration)
            state, est = self._fit_vp(state, gp, iteration, adapt=not warmup)

            whitened = False
            if not warmup and state.whitenings < opts.max_whitenings:
                _, cov = state.vp.moments()
                if np.linalg.cond(cov) > opts.whitening_condition:
                    try:
                        state = apply_whitening(state)
                        state, gp = self._fit_gp(state, iteration)
                        state, est = self._fit_vp(state, gp, iteration, adapt=False)
                        whitened = True
                    except WhiteningError as exc:
                        self.warnings.append(f"iteration {iteration}: whitening skipped ({exc})")

            tp = state.posterior()
            div = self._divergence(prev_tp, tp, iteration)
            ri = _reliability(est.elbo - prev_elbo, est.elbo_sd, div)
            was_warmup = warmup
            if warmup and abs(est.elbo - prev_elbo) < opts.warmup_elbo_change:
                warmup = False
            self.trace.append(IterationRecord(
                iteration=iteration, evaluations=used, elbo=est.elbo, elbo_sd=est.elbo_sd,
                divergence=div, reliability_index=ri, K=state.vp.K, whitening_applied=whitened,
                warmup=was_warmup, wall_time=time.monotonic() - t_iter,
            ))
            log.info("iter %d: evals %d elbo %.4f +- %.4f div %.4g ri %.3g K %d", iteration, used,
                     est.elbo, est.elbo_sd, div, ri, state.vp.K)
            prev_elbo, prev_tp = est.elbo, tp

            if not was_warmup and ri <= opts.reliability_threshold:
                stable += 1
            else:
                stable = 0
            if stable >= opts.stable_iterations_required:
                converged = True
                break

        if not converged:
            msg = (f"evaluation budget of {opts.max_evaluations} exhausted after {used} evaluations "
                   "without meeting the convergence criterion")
            self.warnings.append(msg)
            log.warning(msg)
        return InferenceResult(
            vp=state.posterior(), elbo=est, converged=converged, trace=list(self.trace),
            evaluations_used=used, warnings=list(self.warnings), evaluations=list(self.evaluations),
            wall_time=time.monotonic() - t_start,
        )


def run(target, space: BoundedSpace, options: Options | None = None, x0=None) -> InferenceResult:
    """Approximate the posterior of ``target`` over ``space``.

    Parameters
    ----------
    target : callable, target object or TargetDescriptor
        Log joint density (log likelihood plus log prior) in the original
        parameter space. Callables may return ``(value, noise_sd)`` for
        noisy estimates.
    space : BoundedSpace
    options : Options, optional
    x0 : array_like, optional
        Starting point; becomes the first point of the initial design.

    Returns
    -------
    InferenceResult
    """
    runner = _Runner(target, space, options or Options(), x0)
    try:
        with _warnings.catch_warnings():
            _warnings.simplefilter("ignore", category=RuntimeWarning)
            return runner.run()
    finally:
        runner.target.close()
