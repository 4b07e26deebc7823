"""Exception types shared across the package."""


class NeuralSdeError(Exception):
    """Base class for all package errors."""


class ConfigurationError(NeuralSdeError, ValueError):
    """Invalid dimensions, selectors, or configuration values."""


class ContractViolation(NeuralSdeError):
    """A documented precondition or postcondition does not hold."""


class IntegrationDiverged(NeuralSdeError):
    """A solver produced NaN or Inf.

    ``step`` is the index of the first integration step whose output is not
    finite.
    """

    def __init__(self, step, message=None):
        self.step = int(step)
        super().__init__(message or f"integration diverged at step {self.step}")


class TrainingDiverged(NeuralSdeError):
    """Two consecutive training batches produced non-finite losses."""

    def __init__(self, step, diagnostics=None):
        self.step = int(step)
        self.diagnostics = dict(diagnostics or {})
        super().__init__(f"training aborted after repeated divergence at step {self.step}: {self.diagnostics}")
