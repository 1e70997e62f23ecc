"""Exception types shared across the package.

Plain invalid arguments raise ValueError; the classes below mark failures
that callers may want to catch separately (data problems, solver or
training breakdowns, unparseable files).
"""


class DataError(ValueError):
    """A dataset cannot supply what an operation needs (empty class, too few frames, ...)."""


class FrameParseError(ValueError):
    """A serialized frame file is malformed. Carries the 1-based line number."""

    def __init__(self, message, line_number=None):
        super().__init__(message)
        self.line_number = line_number


class SolverFailure(RuntimeError):
    """Nonlinear refinement could not produce a step. Carries the last iterate."""

    def __init__(self, message, last_controls=None):
        super().__init__(message)
        self.last_controls = last_controls


class TrainingFailure(RuntimeError):
    """Training produced a non-finite loss. Carries the global step index."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class FitFailure(RuntimeError):
    """Iterative weight fitting diverged."""
