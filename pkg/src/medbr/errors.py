import numpy as np


class DomainError(ValueError):
    """An argument lies outside the domain of a density, link or special function."""


class SingularInformationError(np.linalg.LinAlgError):
    """The Fisher information is singular, indefinite or too badly conditioned."""

    def __init__(self, message, condition=np.inf):
        super().__init__(f"{message} (condition estimate {condition:.3g})")
        self.condition = condition


class ResourceError(RuntimeError):
    """A configured computational cap was exceeded."""


class DataError(ValueError):
    """Malformed input data or configuration."""
