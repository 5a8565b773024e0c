"""Exception types shared across the package."""


class ZonetraceError(Exception):
    """Base class for package errors."""


class ConfigError(ZonetraceError):
    """Invalid building or campaign configuration."""


class NonConvergence(ZonetraceError):
    """An iterative solve ran out of iterations.

    Carries the iteration count and the last residual so callers can report
    how close the solve got.
    """

    def __init__(self, message, iterations=None, residual=None):
        super().__init__(message)
        self.iterations = iterations
        self.residual = residual


class SingularJacobian(ZonetraceError):
    """The regularized network Jacobian was not invertible."""


class CouplingDiverged(ZonetraceError):
    """The grid/network coupling fixed point failed to reach tolerance."""

    def __init__(self, message, iteration=None, mismatch=None):
        super().__init__(message)
        self.iteration = iteration
        self.mismatch = mismatch


class IllConditioned(ZonetraceError):
    """A linear system was too ill-conditioned to solve reliably."""


class OptimizationFailed(ZonetraceError):
    """The hyperparameter search returned no usable optimum."""


class OutOfRange(ZonetraceError):
    """A prediction time fell outside the reconstructable window."""


class NoDetection(ZonetraceError):
    """No sensor reading crossed the detection threshold."""


class MissingArtifact(ZonetraceError):
    """A required on-disk artifact (e.g. a trained emulator) is absent."""

    def __init__(self, message, path=None, hint=None):
        super().__init__(message)
        self.path = path
        self.hint = hint
