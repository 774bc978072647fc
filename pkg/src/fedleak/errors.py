"""Exception types raised across the package."""


class FedLeakError(Exception):
    """Base class; `stage` is filled in by the harness when a pipeline stage fails."""

    stage = None


class FormatError(FedLeakError, ValueError):
    pass


class PartitionError(FedLeakError, ValueError):
    pass


class DegenerateProblemError(FedLeakError, ValueError):
    """The loss is not strongly convex on some device, so the convergence rate does not apply."""


class ConvergenceError(FedLeakError, RuntimeError):
    pass


class DivergenceError(FedLeakError, RuntimeError):
    def __init__(self, msg, round=None):
        super().__init__(msg)
        self.round = round


class InferenceError(FedLeakError, RuntimeError):
    """Label inference could not decide from the gradient signs."""


class UnderdeterminedError(FedLeakError, ValueError):
    pass


class EstimationError(FedLeakError, RuntimeError):
    pass


class UndefinedCorrelationError(FedLeakError, ValueError):
    pass


class StageError(FedLeakError, RuntimeError):
    """Wraps an unexpected failure inside a named pipeline stage."""

    def __init__(self, stage, cause):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause
