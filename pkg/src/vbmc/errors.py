"""Exception hierarchy shared by all modules."""


class VBMCError(Exception):
    """Base class for every error raised by this package."""


class DomainError(VBMCError, ValueError):
    """A point lies on or outside the hard bounds of the parameter space."""


class FitError(VBMCError):
    """An optimizer failed on every restart."""


class NumericalError(VBMCError):
    """A factorization or closed-form integral produced non-finite values."""


class SearchError(VBMCError):
    """Acquisition search found no candidate with a finite score."""


class WhiteningError(VBMCError):
    """The variational covariance could not be whitened."""


class TargetError(VBMCError):
    """The user target crashed, timed out, or replied with garbage.

    ``point`` is the original-space point being evaluated (if known),
    ``partial`` holds evaluations completed before the failure and
    ``trace`` the iteration records completed before the failure.
    """

    def __init__(self, message, point=None, partial=None, trace=None):
        super().__init__(message)
        self.point = point
        self.partial = list(partial) if partial is not None else []
        self.trace = list(trace) if trace is not None else []


class ConfigError(VBMCError):
    """A run configuration file is invalid.

    The message is already formatted as ``path:line: text`` when the line is
    known.
    """

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(where + message)
