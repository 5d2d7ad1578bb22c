"""Exception types shared across the package."""

from __future__ import annotations


class InvalidArgumentError(ValueError):
    """An argument violates a documented precondition."""


class OutOfRangeError(ValueError):
    """A numeric argument lies outside the range a formula is defined on."""


class ConvergenceFailureError(RuntimeError):
    """An iterative routine hit its round cap; carries the last iterate."""

    def __init__(self, message, last_iterate=None):
        super().__init__(message)
        self.last_iterate = last_iterate


class NumericalFailureError(RuntimeError):
    """An iterate escaped its sanity bounds (signals a projection bug)."""


class CalibrationInfeasibleError(ValueError):
    """A privacy calibration cannot meet its regime constraints.

    ``max_feasible`` names the largest feasible value of the violated
    parameter (epsilon for shuffle calibration, step count for DP-SGD).
    """

    def __init__(self, message, max_feasible=None):
        super().__init__(message)
        self.max_feasible = max_feasible


class ScheduleError(ValueError):
    """A phase schedule cannot be built; lists what is missing."""

    def __init__(self, message, required_batch_sizes=()):
        super().__init__(message)
        self.required_batch_sizes = tuple(required_batch_sizes)


class DatasetTooSmallError(ValueError):
    """Partitioning rules need more samples; names the required size."""

    def __init__(self, message, required_n=None):
        super().__init__(message)
        self.required_n = required_n


class ParseError(ValueError):
    """Malformed input file; carries the 1-based line number."""

    def __init__(self, message, line_no=None):
        super().__init__(message)
        self.line_no = line_no
