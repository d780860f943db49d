"""Mean and median bias-reduced estimation by adjusted score equations."""

from .engine import (
    AdjustmentBundle,
    CumulantSet,
    CumulantTensor,
    FitResult,
    Method,
    ParameterPoint,
    SolverOptions,
    compute_adjustments,
    solve,
    wald_interval,
)
from .errors import DataError, DomainError, ResourceError, SingularInformationError
from .oracle import index_notation_oracle

__version__ = "0.1.0"

__all__ = [
    "AdjustmentBundle", "CumulantSet", "CumulantTensor", "FitResult", "Method", "ParameterPoint",
    "SolverOptions", "compute_adjustments", "solve", "wald_interval", "index_notation_oracle",
    "DataError", "DomainError", "ResourceError", "SingularInformationError",
]
