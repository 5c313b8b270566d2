"""Bounded parameter spaces and the map to an unbounded inference space.

Finite-bounded coordinates go through a scaled logit
``u = log((x - a) / (b - x))``; unbounded coordinates pass through unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import DomainError

__all__ = ["BoundedSpace"]


def _as_vector(value, dim, name):
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        arr = np.full(dim, float(arr))
    if arr.shape != (dim,):
        raise ValueError(f"{name} must have length {dim}, got shape {arr.shape}")
    return arr


@dataclass(frozen=True, eq=False)
class BoundedSpace:
    """Hard and plausible bounds of a ``dim``-dimensional parameter space.

    Parameters
    ----------
    lower, upper : array_like
        Hard bounds. Each dimension is either finite on both sides or
        infinite on both sides.
    plausible_lower, plausible_upper : array_like, optional
        Finite box where most of the posterior mass is expected. When omitted
        and the hard bounds are finite, the hard box shrunk inward by 2% of
        its width on each side is used. Required for unbounded dimensions.
    """

    lower: np.ndarray
    upper: np.ndarray
    plausible_lower: np.ndarray
    plausible_upper: np.ndarray

    def __init__(self, lower, upper, plausible_lower=None, plausible_upper=None):
        lower = np.atleast_1d(np.asarray(lower, dtype=float)).copy()
        dim = lower.size
        if dim < 1:
            raise ValueError("space needs at least one dimension")
        upper = _as_vector(upper, dim, "upper").copy()

        for d in range(dim):
            lo, hi = lower[d], upper[d]
            if np.isnan(lo) or np.isnan(hi):
                raise ValueError(f"dimension {d}: bounds must not be NaN")
            if not lo < hi:
                raise ValueError(
                    f"dimension {d}: lower bound {lo} must be < upper bound {hi}"
                )
            if np.isfinite(lo) != np.isfinite(hi):
                raise ValueError(
                    f"dimension {d}: half-bounded dimensions are not supported; "
                    "give both bounds finite or both infinite"
                )
            if np.isinf(lo) and (lo > 0 or hi < 0):
                raise ValueError(f"dimension {d}: infinite bounds must be (-inf, inf)")

        bounded = np.isfinite(lower)
        width = np.where(bounded, upper - lower, 0.0)
        if plausible_lower is None:
            if not bounded.all():
                raise ValueError("plausible_lower is required for unbounded dimensions")
            plausible_lower = lower + 0.02 * width
        if plausible_upper is None:
            if not bounded.all():
                raise ValueError("plausible_upper is required for unbounded dimensions")
            plausible_upper = upper - 0.02 * width
        pl = _as_vector(plausible_lower, dim, "plausible_lower").copy()
        pu = _as_vector(plausible_upper, dim, "plausible_upper").copy()

        for d in range(dim):
            if not (np.isfinite(pl[d]) and np.isfinite(pu[d])):
                raise ValueError(f"dimension {d}: plausible bounds must be finite")
            if not lower[d] < pl[d] < pu[d] < upper[d]:
                raise ValueError(
                    f"dimension {d}: need lower < plausible_lower < plausible_upper"
                    f" < upper, got {lower[d]}, {pl[d]}, {pu[d]}, {upper[d]}"
                )

        for arr in (lower, upper, pl, pu):
            arr.setflags(write=False)
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)
        object.__setattr__(self, "plausible_lower", pl)
        object.__setattr__(self, "plausible_upper", pu)

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def bounded(self) -> np.ndarray:
        """Boolean mask of finite-bounded dimensions."""
        return np.isfinite(self.lower)

    def __eq__(self, other):
        if not isinstance(other, BoundedSpace):
            return NotImplemented
        return all(
            np.array_equal(getattr(self, f), getattr(other, f))
            for f in ("lower", "upper", "plausible_lower", "plausible_upper")
        )

    __hash__ = None

    def is_interior(self, x) -> np.ndarray:
        """Row-wise test that ``x`` is strictly inside the hard bounds."""
        x = np.asarray(x, dtype=float)
        inside = (x > self.lower) & (x < self.upper) & np.isfinite(x)
        return inside.all(axis=-1)

    def to_unbounded(self, x) -> np.ndarray:
        """Map original-space point(s) to the inference space.

        Raises
        ------
        DomainError
            If any coordinate lies on or outside its hard bounds.
        """
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.dim:
            raise ValueError(f"expected last axis of length {self.dim}, got {x.shape}")
        if not np.all(self.is_interior(x)):
            raise DomainError(f"point outside hard bounds: {x}")
        b = self.bounded
        if not b.any():
            return x.copy()
        u = x.copy()
        lo, hi = self.lower[b], self.upper[b]
        xb = x[..., b]
        u[..., b] = np.log(xb - lo) - np.log(hi - xb)
        return u

    def to_original(self, u) -> np.ndarray:
        """Inverse of :meth:`to_unbounded`."""
        u = np.asarray(u, dtype=float)
        if u.shape[-1] != self.dim:
            raise ValueError(f"expected last axis of length {self.dim}, got {u.shape}")
        b = self.bounded
        x = u.copy()
        if b.any():
            lo, hi = self.lower[b], self.upper[b]
            ub = u[..., b]
            # Pick the side closer to the active bound to keep precision.
            x[..., b] = np.where(
                ub <= 0,
                lo + (hi - lo) * expit(ub),
                hi - (hi - lo) * expit(-ub),
            )
        return x

    def log_abs_det_jacobian(self, u) -> np.ndarray | float:
        """``log |det dx/du|`` at inference-space point(s) ``u``."""
        u = np.asarray(u, dtype=float)
        b = self.bounded
        if not b.any():
            out = np.zeros(u.shape[:-1])
        else:
            ub = u[..., b]
            width = self.upper[b] - self.lower[b]
            per_dim = np.log(width) - np.logaddexp(0.0, ub) - np.logaddexp(0.0, -ub)
            out = per_dim.sum(axis=-1)
        return float(out) if out.ndim == 0 else out

    def plausible_box_unbounded(self) -> tuple[np.ndarray, np.ndarray]:
        """Plausible box corners expressed in the inference space."""
        return (
            self.to_unbounded(self.plausible_lower),
            self.to_unbounded(self.plausible_upper),
        )
