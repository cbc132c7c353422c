"""Exception hierarchy shared by every protoseg module."""


class ProtosegError(Exception):
    """Base class for all library errors."""


class ZeroVector(ProtosegError, ValueError):
    pass


class NonNormalized(ProtosegError, ValueError):
    pass


class DimensionMismatch(ProtosegError, ValueError):
    pass


class InvalidShape(ProtosegError, ValueError):
    pass


class ClassMismatch(ProtosegError, ValueError):
    pass


class InvalidKappa(ProtosegError, ValueError):
    pass


class NumericalOverflow(ProtosegError, ArithmeticError):
    pass


class MissingAssignment(ProtosegError, ValueError):
    pass


class StaleCache(ProtosegError, RuntimeError):
    pass


class InvalidSpec(ProtosegError, ValueError):
    pass


class FormatError(ProtosegError, ValueError):
    """Malformed input file. ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class IoFailure(ProtosegError, OSError):
    pass


class NumericalDivergence(ProtosegError, ArithmeticError):
    """A loss component became NaN/Inf. ``component`` names which one."""

    def __init__(self, component: str, iteration: int | None = None):
        self.component = component
        self.iteration = iteration
        where = f" at iteration {iteration}" if iteration is not None else ""
        super().__init__(f"non-finite value in {component}{where}")


class EmptySplit(ProtosegError, ValueError):
    pass


class ConfigError(ProtosegError, ValueError):
    pass
