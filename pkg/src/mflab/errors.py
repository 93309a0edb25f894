"""Exception types shared across the package."""


class MflabError(Exception):
    """Base class for all package errors."""


class DomainError(MflabError, ValueError):
    """An input lies outside the domain of a primitive (non-finite, negative time, ...)."""


class ConfigurationError(MflabError, ValueError):
    """A model, data or embedding configuration cannot be used."""


class StructuralError(MflabError, ValueError):
    """Array shapes do not match the network architecture."""


class HorizonError(MflabError, IndexError):
    """A requested time lies outside a stored trajectory, or grids do not align."""


class NumericalOverflowError(MflabError, FloatingPointError):
    """A state became non-finite during training or integration.

    Exactly one of ``step`` (discrete SGD step) or ``time`` (ODE time) is set.
    """

    def __init__(self, message, step=None, time=None):
        super().__init__(message)
        self.step = step
        self.time = time
