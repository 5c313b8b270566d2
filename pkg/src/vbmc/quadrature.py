"""ELBO estimation by Bayesian quadrature and variational optimization.

The expected log joint ``E_q[f]`` is integrated in closed form against the GP
posterior: with ``s_kd = sigma_k * lambda_d`` and ``tau_kd = ell_d^2 + s_kd^2``,

    z_kn = sf^2 prod_d ell_d / sqrt(tau_kd) exp(-(mu_kd - x_nd)^2 / (2 tau_kd))

is the kernel mean of training point ``n`` under component ``k``, and the
quadratic prior mean integrates exactly against every component. The entropy
has no closed form for mixtures and is estimated by reparameterized Monte
Carlo.

Gradients are returned with respect to
:meth:`VariationalPosterior.to_unconstrained`, whose trailing block (log
weights) is treated as softmax logits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import logsumexp

from .errors import FitError, NumericalError
from .gp import GpSurrogate
from .posterior import VariationalPosterior

__all__ = [
    "ElboEstimate",
    "OptimizeOptions",
    "expected_log_joint",
    "entropy_mc",
    "elbo",
    "optimize_vp",
    "adapt_components",
    "split_component",
]

LOG2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class ElboEstimate:
    elbo: float
    elbo_sd: float
    expected_log_joint: float
    entropy: float

    def elcbo(self, beta: float = 3.0) -> float:
        """Pessimistic score ``elbo - beta * elbo_sd``."""
        return self.elbo - beta * self.elbo_sd


@dataclass(frozen=True)
class OptimizeOptions:
    """Knobs for :func:`optimize_vp` and :func:`adapt_components`."""

    step_size: float = 0.01
    max_steps: int = 2000
    n_restarts: int = 2
    ema_decay: float = 0.9
    tol: float = 1e-4
    patience: int = 200
    entropy_samples: int = 64
    eval_samples: int = 2**12
    beta: float = 3.0
    prune_threshold: float = 1e-8
    K_max: int = 50
    seed: int = 0


def _pack_grad(K, D, g_mu, g_logs, g_logit):
    """Chain per-component-dimension log-scale gradients to (log sigma, log lambda)."""
    return np.concatenate([g_mu.ravel(), g_logs.sum(axis=1), g_logs.sum(axis=0), g_logit])


def expected_log_joint(vp: VariationalPosterior, gp: GpSurrogate, compute_grad: bool = True):
    """Posterior mean, variance and gradient of ``integral f(x) q(x) dx``.

    Returns
    -------
    value : float
    variance : float
        Posterior variance of the integral under the GP, clamped at zero.
    grad : ndarray or None
        Gradient of ``value`` with respect to ``vp.to_unconstrained()``.
    """
    hyper = gp.hyper
    X = gp.data.X
    alpha = gp.alpha
    w, mu = vp.weights, vp.means
    K, D = mu.shape
    ell2 = hyper.lengthscales**2
    sf2 = hyper.outputscale**2
    om2 = hyper.omega**2

    s2 = vp.scales**2                                  # K x D
    tau = ell2[None, :] + s2                            # K x D
    delta = mu[:, None, :] - X[None, :, :]              # K x N x D
    log_z = (
        math.log(sf2)
        + 0.5 * np.sum(np.log(ell2[None, :] / tau), axis=1)[:, None]
        - 0.5 * np.sum(delta**2 / tau[:, None, :], axis=2)
    )
    z = np.exp(log_z)                                   # K x N

    dm = mu - hyper.x_m
    mean_term = hyper.m0 - 0.5 * np.sum((dm**2 + s2) / om2, axis=1)
    I = mean_term + z @ alpha                           # K
    value = float(w @ I)

    # Variance: w^T (J - Z Ky^-1 Z^T) w.
    tau2 = ell2[None, None, :] + s2[:, None, :] + s2[None, :, :]
    dmu = mu[:, None, :] - mu[None, :, :]
    J = sf2 * np.exp(
        0.5 * np.sum(np.log(ell2[None, None, :] / tau2), axis=2)
        - 0.5 * np.sum(dmu**2 / tau2, axis=2)
    )
    Q = z @ gp.solve(z.T)
    variance = float(w @ (J - Q) @ w)
    if not (np.isfinite(value) and np.isfinite(variance)):
        raise NumericalError("non-finite Bayesian quadrature integral")
    variance = max(variance, 0.0)

    if not compute_grad:
        return value, variance, None

    A = z * alpha[None, :]                              # K x N
    dI_dmu = -dm / om2 - np.einsum("kn,knd->kd", A, delta) / tau
    dI_ds2 = (
        -0.5 / om2
        - 0.5 * A.sum(axis=1)[:, None] / tau
        + 0.5 * np.einsum("kn,knd->kd", A, delta**2) / tau**2
    )
    g_mu = w[:, None] * dI_dmu
    g_logs = w[:, None] * dI_ds2 * 2.0 * s2
    g_logit = w * (I - value)
    grad = _pack_grad(K, D, g_mu, g_logs, g_logit)
    if not np.all(np.isfinite(grad)):
        raise NumericalError("non-finite expected log joint gradient")
    return value, variance, grad


def entropy_mc(vp: VariationalPosterior, n_samples: int = 64, seed=None, compute_grad: bool = True,
               return_variance: bool = False):
    """Reparameterized Monte Carlo estimate of ``-E_q[log q]``.

    Draws are stratified by component: ``ceil(n_samples / K)`` standard
    normal vectors per component, scaled and shifted by that component, and
    the per-component averages are combined with the mixture weights, so no
    score-function term is needed for the weights.

    Returns ``(value, grad)``, or ``(value, grad, variance)`` when
    ``return_variance`` is set; ``grad`` is ``None`` without
    ``compute_grad``.
    """
    if n_samples < 16:
        raise ValueError("entropy_mc needs at least 16 samples")
    rng = np.random.default_rng(seed)
    w, mu, S = vp.weights, vp.means, vp.scales
    K, D = mu.shape
    n_per = -(-n_samples // K)
    eps = rng.standard_normal((K, n_per, D))
    Xs = mu[:, None, :] + S[:, None, :] * eps           # K x S x D

    with np.errstate(divide="ignore"):
        logw = np.log(w)
    log_norm = -np.sum(np.log(S), axis=1) - 0.5 * D * LOG2PI       # K
    diff = Xs[:, :, None, :] - mu[None, None, :, :]                 # K x S x J x D
    zz = diff / S[None, None, :, :]
    log_comp = log_norm[None, None, :] - 0.5 * np.sum(zz * zz, axis=3) + logw[None, None, :]
    log_q = logsumexp(log_comp, axis=2)                              # K x S

    h = log_q.mean(axis=1)                                           # K
    value = -float(w @ h)
    variance = float(np.sum(w**2 * log_q.var(axis=1)) / n_per)

    grad = None
    if compute_grad:
        R = np.exp(log_comp - log_q[:, :, None])                     # K x S x J
        coef = w[:, None] / n_per                                    # d/d(log q_ks) of -H
        # Explicit dependence through component j's parameters.
        r_zs = R[..., None] * zz / S[None, None, :, :]               # K x S x J x D
        g_mu = np.einsum("ks,ksjd->jd", coef, r_zs)
        g_logs = np.einsum("ks,ksjd->jd", coef, R[..., None] * (zz * zz - 1.0))
        # Reparameterization through the sample location x_ks.
        grad_x = -np.sum(r_zs, axis=2)                               # K x S x D
        g_mu += np.einsum("ks,ksd->kd", coef, grad_x)
        g_logs += np.einsum("ks,ksd->kd", coef, grad_x * S[:, None, :] * eps)
        g_logit = np.einsum("ks,ksj->j", coef, R - w[None, None, :])
        # Explicit mixture weights multiplying the per-component averages.
        g_logit += w * (h - w @ h)
        # Above is the gradient of E[log q]; entropy is its negative.
        grad = -_pack_grad(K, D, g_mu, g_logs, g_logit)

    if return_variance:
        return value, grad, variance
    return value, grad


def elbo(vp: VariationalPosterior, gp: GpSurrogate, n_entropy_samples: int = 2**14, seed=None) -> ElboEstimate:
    """Evidence lower bound with its standard deviation.

    ``elbo_sd`` combines the GP posterior variance of the expected log joint
    with the Monte Carlo variance of the entropy estimate.
    """
    G, var_G, _ = expected_log_joint(vp, gp, compute_grad=False)
    H, _, var_H = entropy_mc(vp, n_entropy_samples, seed, compute_grad=False, return_variance=True)
    return ElboEstimate(G + H, math.sqrt(var_G + var_H), G, H)


def _elbo_and_grad(theta, K, D, gp, n_samples, rng):
    vp = VariationalPosterior.from_unconstrained(theta, K, D)
    G, _, gG = expected_log_joint(vp, gp)
    H, gH = entropy_mc(vp, n_samples, rng)
    return G + H, gG + gH


def split_component(vp: VariationalPosterior, offset: float = 0.5) -> VariationalPosterior:
    """Split the heaviest component in two along its widest axis.

    The halves sit at ``mu +- offset * sigma_k * lambda_d`` on the axis ``d``
    with the largest ``lambda_d`` and share the parent's weight equally.
    """
    k = int(np.argmax(vp.weights))
    d = int(np.argmax(vp.lam))
    step = np.zeros(vp.dim)
    step[d] = offset * vp.sigma[k] * vp.lam[d]
    means = np.vstack([vp.means, vp.means[k] + step])
    means[k] = vp.means[k] - step
    weights = np.append(vp.weights, vp.weights[k] / 2)
    weights[k] /= 2
    sigma = np.append(vp.sigma, vp.sigma[k])
    return VariationalPosterior(weights, means, sigma, vp.lam)


def _resize(vp: VariationalPosterior, K: int) -> VariationalPosterior:
    while vp.K < K:
        vp = split_component(vp)
    if vp.K > K:
        keep = np.sort(np.argsort(-vp.weights, kind="stable")[:K])
        w = vp.weights[keep]
        vp = VariationalPosterior(w / w.sum(), vp.means[keep], vp.sigma[keep], vp.lam)
    return vp


def _adam(theta0, K, D, gp, opts: OptimizeOptions, rng):
    """Adam ascent on the stochastic ELBO; returns ``(theta, diverged)``."""
    b1, b2, eps = 0.9, 0.999, 1e-8
    theta = theta0.copy()
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    history = []
    ema = None
    best_theta, best_ema = theta.copy(), -np.inf
    for t in range(1, opts.max_steps + 1):
        try:
            f, g = _elbo_and_grad(theta, K, D, gp, opts.entropy_samples, rng)
        except (NumericalError, ValueError, FloatingPointError):
            return best_theta, best_ema == -np.inf
        if not (np.isfinite(f) and np.all(np.isfinite(g))):
            return best_theta, best_ema == -np.inf
        ema = f if ema is None else opts.ema_decay * ema + (1 - opts.ema_decay) * f
        history.append(ema)
        if t > 10 and ema > best_ema:
            best_ema, best_theta = ema, theta.copy()
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        theta = theta + opts.step_size * mhat / (np.sqrt(vhat) + eps)
        if t > opts.patience and history[-1] - history[-1 - opts.patience] < opts.tol:
            break
    if not np.all(np.isfinite(theta)):
        return best_theta, best_ema == -np.inf
    return theta, False


def optimize_vp(gp: GpSurrogate, K_target: int, init: VariationalPosterior,
                opts: OptimizeOptions | None = None):
    """Fit the variational posterior to the GP surrogate.

    Runs ``opts.n_restarts`` Adam ascents on the stochastic ELBO (restart 0
    from ``init`` resized to ``K_target`` components, later restarts from
    jittered copies) and keeps the candidate with the highest ELCBO. The
    unchanged ``init`` competes as well, so the result is never worse than
    the starting point by more than Monte Carlo noise.

    Returns
    -------
    (VariationalPosterior, ElboEstimate)

    Raises
    ------
    FitError
        If every restart diverges.
    """
    opts = opts or OptimizeOptions()
    if K_target < 1:
        raise ValueError("K_target must be at least 1")
    ss = np.random.SeedSequence([opts.seed, K_target])
    restart_seeds = ss.spawn(opts.n_restarts + 1)
    eval_seed = restart_seeds[-1].generate_state(1)[0]

    start = _resize(init, K_target)
    K, D = start.K, start.dim
    theta_start = start.to_unconstrained()
    theta_start[K * D + K + D :] = np.log(np.maximum(start.weights, 1e-12))

    candidates = []
    diverged = 0
    for r in range(opts.n_restarts):
        rng = np.random.default_rng(restart_seeds[r])
        theta0 = theta_start.copy()
        if r > 0:
            jitter = rng.standard_normal((K, D)) * start.scales * 0.5
            theta0[: K * D] += jitter.ravel()
            theta0[K * D : K * D + K] += 0.2 * rng.standard_normal(K)
        theta, bad = _adam(theta0, K, D, gp, opts, rng)
        if bad:
            diverged += 1
            continue
        try:
            vp = VariationalPosterior.from_unconstrained(theta, K, D)
            est = elbo(vp, gp, opts.eval_samples, eval_seed)
        except (NumericalError, ValueError):
            diverged += 1
            continue
        if np.isfinite(est.elbo) and np.isfinite(est.elbo_sd):
            candidates.append((est.elcbo(opts.beta), r, vp, est))
        else:
            diverged += 1
    if not candidates:
        raise FitError("every variational restart diverged")

    # init competes only when it already has the requested component count.
    if init.K == K_target:
        try:
            est0 = elbo(init, gp, opts.eval_samples, eval_seed)
            if np.isfinite(est0.elbo):
                candidates.append((est0.elcbo(opts.beta), opts.n_restarts, init, est0))
        except NumericalError:
            pass
    candidates.sort(key=lambda c: (-c[0], c[1]))
    _, _, vp, est = candidates[0]
    return vp, est


def adapt_components(vp: VariationalPosterior, gp: GpSurrogate, opts: OptimizeOptions | None = None):
    """One round of component-count adaptation.

    Prunes negligible components, then tries one extra component by
    splitting the heaviest one. The larger mixture is kept only when its
    ELBO gain exceeds the current ``elbo_sd`` and its ELCBO is higher.
    Falls back to the (pruned) input on any failure.
    """
    opts = opts or OptimizeOptions()
    vp = vp.prune(opts.prune_threshold)
    if vp.K >= opts.K_max:
        return vp
    seed = np.random.SeedSequence([opts.seed, 7919, vp.K]).generate_state(1)[0]
    try:
        current = elbo(vp, gp, opts.eval_samples, seed)
        grown, _ = optimize_vp(gp, vp.K + 1, vp, opts)
        grown = grown.prune(opts.prune_threshold)
        if grown.K <= vp.K:
            return vp
        proposal = elbo(grown, gp, opts.eval_samples, seed)
    except (FitError, NumericalError):
        return vp
    gain = proposal.elbo - current.elbo
    if gain > current.elbo_sd and proposal.elcbo(opts.beta) > current.elcbo(opts.beta):
        return grown
    return vp


def with_seed(opts: OptimizeOptions, seed: int) -> OptimizeOptions:
    return replace(opts, seed=int(seed))
