"""Exception hierarchy shared across the package.

Two broad classes matter for the CLI exit-code contract: UsageError (and
subclasses) map to exit code 2, everything else derived from
OdeProfileError maps to exit code 1.
"""


class OdeProfileError(Exception):
    """Base class for all package errors."""


class UsageError(OdeProfileError, ValueError):
    """Caller violated a precondition (bad dimensions, bad config, bad file)."""


class DomainError(UsageError):
    """Evaluation point outside the time domain [0, T]."""


class NotFoundError(UsageError, KeyError):
    """Lookup of an unknown named resource (e.g. builtin system)."""


class EvaluationError(OdeProfileError, RuntimeError):
    """A numeric evaluation produced a non-finite or invalid result.

    ``context`` carries whatever identifies the failing evaluation
    (time point, state, observation index, ...).
    """

    def __init__(self, message, **context):
        super().__init__(message)
        self.context = dict(context)


class BlowUpError(EvaluationError):
    """ODE integration left the finite range; carries the last finite time."""

    def __init__(self, message, last_time, last_state=None, **context):
        super().__init__(message, last_time=last_time, **context)
        self.last_time = last_time
        self.last_state = last_state


class DivergenceError(EvaluationError):
    """An iterative solve failed persistently; carries the last finite iterate."""

    def __init__(self, message, last_iterate=None, **context):
        super().__init__(message, **context)
        self.last_iterate = last_iterate


class SingularCovarianceError(EvaluationError):
    """Criterion Hessian estimate is singular or too ill conditioned."""

    def __init__(self, message, matrix=None, condition_number=None, **context):
        super().__init__(message, condition_number=condition_number, **context)
        self.matrix = matrix
        self.condition_number = condition_number


class SensitivityError(EvaluationError):
    """A finite-difference sensitivity probe failed; names the probe."""

    def __init__(self, message, probe=None, **context):
        super().__init__(message, probe=probe, **context)
        self.probe = probe
