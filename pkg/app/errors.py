from typing import Optional


# ============================================================
# 🚨 Error hierarchy (each class carries its CLI exit code)
# ============================================================
class BranchwaveError(Exception):
    exit_code: int = 1


class PreconditionError(BranchwaveError, ValueError):
    """Bad configuration or an input that violates a documented precondition."""

    exit_code = 2


class DomainError(PreconditionError):
    pass


class InvalidArgumentError(PreconditionError):
    pass


class WellPosednessError(PreconditionError):
    def __init__(self, message: str, margin: Optional[float] = None):
        super().__init__(message)
        self.margin = margin


class BoundViolationError(PreconditionError):
    pass


class ConfigError(PreconditionError):
    pass


class AuditFailureError(BranchwaveError):
    """A size bound or distillation audit did not hold."""

    exit_code = 3


class NumericalDiagnosticError(BranchwaveError):
    exit_code = 4


class QuadratureError(NumericalDiagnosticError):
    def __init__(self, message: str, achieved: float):
        super().__init__(f"{message} (achieved error estimate {achieved:.3e})")
        self.achieved = achieved


class ContractionError(NumericalDiagnosticError):
    def __init__(self, message: str, ratios: Optional[list] = None):
        super().__init__(message)
        self.ratios = ratios or []
