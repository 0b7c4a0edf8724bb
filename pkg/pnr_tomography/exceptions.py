from typing import Any, Dict, Optional, Sequence


class TomographyError(Exception):
    """Base class for every error raised by pnr_tomography."""


class InvalidArgumentError(TomographyError, ValueError):
    pass


class UnsupportedSizeError(InvalidArgumentError):
    pass


class ConditioningError(TomographyError, ArithmeticError):
    def __init__(self, message: str, smallest_eigenvalue: Optional[float] = None):
        super().__init__(message)
        self.smallest_eigenvalue = smallest_eigenvalue


class DegenerateMaskError(TomographyError):
    def __init__(self, message: str, rows: Sequence[int] = ()):
        super().__init__(message)
        self.rows = list(rows)


class InfeasibleProblemError(TomographyError):
    def __init__(self, message: str, certificate: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.certificate = certificate or {}


class ModelMismatchError(TomographyError, ArithmeticError):
    def __init__(self, message: str, outcome: int):
        super().__init__(message)
        self.outcome = outcome


class UndefinedMomentError(TomographyError, ArithmeticError):
    pass


class UnderdeterminedFitError(TomographyError, ValueError):
    pass
