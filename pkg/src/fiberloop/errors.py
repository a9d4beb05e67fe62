"""Exception types shared across fiberloop."""


class FiberloopError(Exception):
    """Base class for all package errors."""


class InfeasibleEndpoints(FiberloopError, ValueError):
    pass


class NumericalDivergence(FiberloopError, FloatingPointError):
    pass


class DegenerateLine(FiberloopError, ValueError):
    pass


class PointAtInfinity(FiberloopError, ValueError):
    pass


class LengthMismatch(FiberloopError, ValueError):
    pass


class EmptyDataset(FiberloopError, ValueError):
    pass


class VersionMismatch(FiberloopError, ValueError):
    pass


class InvariantViolation(FiberloopError, ValueError):
    pass


class ShapeMismatch(FiberloopError, ValueError):
    pass


class NonFiniteLoss(FiberloopError, FloatingPointError):
    pass


class ConfigParseError(FiberloopError, ValueError):
    pass


class ConfigValidationError(FiberloopError, ValueError):
    """Raised with every violation found, not only the first."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))
