"""Exception hierarchy shared by every module of the package."""


class AoiSelectError(Exception):
    """Base class for all package errors."""


class InvalidParameterError(AoiSelectError, ValueError):
    pass


class InvalidOutcomeError(AoiSelectError, ValueError):
    pass


class InvalidStateError(AoiSelectError, ValueError):
    pass


class NoStationaryDistributionError(AoiSelectError, ValueError):
    """Raised when the maximum-age state is reachable but absorbing (p_{m'} = 0)."""


class InfeasibleCalibrationError(AoiSelectError, ValueError):
    def __init__(self, message: str, achievable: tuple[float, float]):
        super().__init__(message)
        self.achievable = achievable


class OracleScopeError(AoiSelectError, ValueError):
    pass


class InsufficientDataError(AoiSelectError, ValueError):
    pass


class SkewUndefinedError(AoiSelectError, ArithmeticError):
    pass


class TrustRegionError(AoiSelectError, RuntimeError):
    """The iterate left the ball on which the gradient bound G^2 was declared."""
