"""Approximate Bayesian inference for expensive log densities.

A Gaussian-process surrogate of the log joint is fitted to a small number of
evaluations and a Gaussian-mixture variational posterior is fitted to the
surrogate, with new evaluation points chosen by active sampling.
"""

__version__ = "0.1.0"

from .engine import InferenceResult, IterationRecord, Options, run
from .errors import (
    ConfigError,
    DomainError,
    FitError,
    NumericalError,
    SearchError,
    TargetError,
    VBMCError,
    WhiteningError,
)
from .posterior import TransformedPosterior, VariationalPosterior
from .space import BoundedSpace
from .target import CallableTarget, SubprocessTarget, TargetDescriptor, TargetKind, serve

__all__ = [
    "BoundedSpace",
    "Options",
    "run",
    "InferenceResult",
    "IterationRecord",
    "VariationalPosterior",
    "TransformedPosterior",
    "TargetDescriptor",
    "TargetKind",
    "CallableTarget",
    "SubprocessTarget",
    "serve",
    "VBMCError",
    "DomainError",
    "FitError",
    "NumericalError",
    "SearchError",
    "TargetError",
    "WhiteningError",
    "ConfigError",
]
