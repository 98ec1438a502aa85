#!/usr/bin/env python3
"""
Exception types for hybridseg.

Each error carries a category, and the category fixes the process exit code
(2 bad input, 3 solver failure, 4 degenerate geometry, 1 anything else).
"""

from typing import Optional, Dict, Any
from enum import Enum

import numpy as np
from scipy.sparse.linalg import ArpackError, ArpackNoConvergence

from logger_config import get_logger

logger = get_logger(__name__)


class ErrorCategory(Enum):
    """Failure kinds; each maps to one CLI exit code"""
    VALIDATION = "validation_error"
    PARSE = "parse_error"
    NUMERICAL = "numerical_error"
    DEGENERATE = "degenerate_input"
    NO_CONSENSUS = "no_consensus"
    SYSTEM = "system_error"


EXIT_CODES = {
    ErrorCategory.VALIDATION: 2,
    ErrorCategory.PARSE: 2,
    ErrorCategory.NUMERICAL: 3,
    ErrorCategory.DEGENERATE: 4,
    ErrorCategory.NO_CONSENSUS: 4,
    ErrorCategory.SYSTEM: 1,
}


class GeometryError(Exception):
    """Base geometry error with categorization"""

    def __init__(
        self,
        message: str,
        category: ErrorCategory = ErrorCategory.SYSTEM,
        user_message: Optional[str] = None,
        details: Optional[Dict[str, Any]] = None,
    ):
        super().__init__(message)
        self.message = message
        self.category = category
        self.user_message = user_message or message
        self.details = details or {}

    @property
    def exit_code(self) -> int:
        return EXIT_CODES[self.category]

    def to_dict(self) -> Dict[str, Any]:
        """Convert error to dictionary for the run report"""
        return {
            "success": False,
            "error": {
                "category": self.category.value,
                "message": self.user_message,
                "details": self.details,
                "exit_code": self.exit_code,
            },
        }

    def one_line(self) -> str:
        """Single-line diagnostic for stderr"""
        return f"error[{self.category.value}]: {self.user_message}"

    def log(self):
        """Log the error with appropriate level"""
        log_data = {
            "category": self.category.value,
            "details": self.details,
        }

        if self.category in [ErrorCategory.SYSTEM, ErrorCategory.NUMERICAL]:
            logger.error(self.message, **log_data)
        else:
            logger.warning(self.message, **log_data)


class ValidationError(GeometryError):
    """Input or parameter validation error"""

    def __init__(self, message: str, field: Optional[str] = None, **kwargs):
        details = kwargs.pop("details", {})
        if field:
            details["field"] = field
        super().__init__(
            message=message,
            category=ErrorCategory.VALIDATION,
            details=details,
            **kwargs
        )


class CloudParseError(GeometryError):
    """File could not be parsed under the declared format"""

    def __init__(self, message: str, path: Optional[str] = None,
                 line: Optional[int] = None, offset: Optional[int] = None, **kwargs):
        details = kwargs.pop("details", {})
        if path:
            details["path"] = str(path)
        if line is not None:
            details["line"] = line
            message = f"{message} (line {line})"
        if offset is not None:
            details["offset"] = offset
            message = f"{message} (byte offset {offset})"
        super().__init__(
            message=message,
            category=ErrorCategory.PARSE,
            details=details,
            **kwargs
        )


class NumericalError(GeometryError):
    """Solver failure or non-finite intermediate"""

    def __init__(self, message: str, solver: Optional[str] = None, **kwargs):
        details = kwargs.pop("details", {})
        if solver:
            details["solver"] = solver
        super().__init__(
            message=message,
            category=ErrorCategory.NUMERICAL,
            details=details,
            **kwargs
        )


class SpectralRankError(NumericalError):
    """Fewer significant eigenvalues than requested"""

    def __init__(self, message: str, requested: Optional[int] = None,
                 eigenvalue: Optional[float] = None, **kwargs):
        details = kwargs.pop("details", {})
        if requested is not None:
            details["requested"] = requested
        if eigenvalue is not None:
            details["eigenvalue"] = eigenvalue
        super().__init__(message=message, details=details, **kwargs)


class DegenerateInputError(GeometryError):
    """Geometry too degenerate for the requested operation"""

    def __init__(self, message: str, **kwargs):
        super().__init__(
            message=message,
            category=ErrorCategory.DEGENERATE,
            **kwargs
        )


class InsufficientNeighborhoodError(DegenerateInputError):
    """Neighborhood has fewer points than local PCA needs"""

    def __init__(self, point_id: int, count: int, **kwargs):
        super().__init__(
            message=f"insufficient neighborhood at point {point_id}: {count} neighbors (need 3)",
            details={"point_id": int(point_id), "count": int(count)},
            **kwargs
        )


class NoConsensusError(GeometryError):
    """RANSAC found no hypothesis with enough inliers"""

    def __init__(self, message: str = "no consensus", best_inliers: Optional[int] = None,
                 required: Optional[int] = None, **kwargs):
        details = kwargs.pop("details", {})
        if best_inliers is not None:
            details["best_inliers"] = best_inliers
        if required is not None:
            details["required"] = required
        super().__init__(
            message=message,
            category=ErrorCategory.NO_CONSENSUS,
            details=details,
            **kwargs
        )


def handle_exception(e: Exception) -> GeometryError:
    """
    Wrap a library or system exception in the matching GeometryError

    Args:
        e: Exception to convert

    Returns:
        GeometryError instance
    """
    if isinstance(e, GeometryError):
        return e

    error_message = str(e)

    if isinstance(e, np.linalg.LinAlgError):
        return NumericalError(f"Linear algebra failure: {error_message}", solver="numpy.linalg")

    if isinstance(e, (ArpackNoConvergence, ArpackError)):
        return NumericalError(f"Lanczos failure: {error_message}", solver="arpack")

    if isinstance(e, OSError):
        return ValidationError(f"File access failed: {error_message}", field=getattr(e, "filename", None))

    if isinstance(e, ValueError):
        return ValidationError(f"Invalid value: {error_message}")

    if isinstance(e, FloatingPointError):
        return NumericalError(f"Floating point failure: {error_message}")

    # Default to system error
    return GeometryError(
        message=f"Unexpected error: {error_message}",
        category=ErrorCategory.SYSTEM
    )
