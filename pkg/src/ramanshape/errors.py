"""Exception types raised across the package."""


class RamanShapeError(Exception):
    """Base class for all package errors."""


class ConfigError(RamanShapeError, ValueError):
    pass


class DomainError(RamanShapeError, ValueError):
    """A frequency was requested outside the configured curve domain."""


class NumericalBlowupError(RamanShapeError, ArithmeticError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class ResolutionError(RamanShapeError, ValueError):
    pass


class ShapeError(RamanShapeError, ValueError):
    pass


class FormatError(RamanShapeError, ValueError):
    """File has the wrong magic bytes or an unsupported version."""


class CorruptionError(RamanShapeError, ValueError):
    """File is truncated or its sections are inconsistent."""


class DivergenceError(RamanShapeError, ArithmeticError):
    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class UndefinedMetricError(RamanShapeError, ValueError):
    pass


class MissingArtifactError(RamanShapeError, FileNotFoundError):
    pass
