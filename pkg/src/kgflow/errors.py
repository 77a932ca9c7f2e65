"""Exception types raised across the package."""


class KGFlowError(Exception):
    """Base class for all package errors."""


class DomainError(KGFlowError, ValueError):
    """An input point lies outside the unit interval."""


class StabilityError(KGFlowError, ValueError):
    """A discrete filter was evaluated where ``1 - eta * z`` turns negative."""


class UnsupportedOperationError(KGFlowError, NotImplementedError):
    """The kernel does not carry the structure the operation needs (e.g. a spectrum)."""


class NumericalError(KGFlowError, ArithmeticError):
    """A linear-algebra routine failed."""


class DegenerateCovarianceError(KGFlowError, ArithmeticError):
    """The empirical covariance vanishes at a grid point, so studentization is undefined."""

    def __init__(self, point: float, index: int):
        self.point = point
        self.index = index
        super().__init__(
            f"empirical covariance is zero at grid point x={point:.6g} (index {index})"
        )
