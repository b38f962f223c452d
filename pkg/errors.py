"""
Exception hierarchy shared by every module of the pixel dynamics model
"""


class PixelDynError(Exception):
    """Base class for all errors raised by this project"""


class ContractError(PixelDynError, ValueError):
    """A precondition of an operation was violated"""


class CovarianceError(ContractError):
    """A covariance matrix is not symmetric positive semi-definite"""


class NumericalError(PixelDynError, ArithmeticError):
    """A computation produced a singular or non-finite quantity"""

    def __init__(self, message, step=None, iteration=None):
        super().__init__(message)
        self.step = step
        self.iteration = iteration


class FormatError(PixelDynError):
    """A dataset or checkpoint file could not be decoded"""


class ConfigError(PixelDynError):
    """Invalid configuration key, value or preset"""
