"""Exception types shared across the package."""


class SnnForgeError(Exception):
    """Base class for all package errors."""


class ShapeError(SnnForgeError, ValueError):
    pass


class DivergenceError(SnnForgeError, FloatingPointError):
    """Raised when membrane potentials, losses or gradients become non-finite."""

    def __init__(self, message, layer=None, timestep=None):
        super().__init__(message)
        self.layer = layer
        self.timestep = timestep


class CheckpointError(SnnForgeError):
    pass


class DataFormatError(SnnForgeError, ValueError):
    pass


class ConfigError(SnnForgeError, ValueError):
    pass
