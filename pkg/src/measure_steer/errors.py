"""Exception hierarchy shared by all solver modules."""

from __future__ import annotations


class MeasureSteerError(Exception):
    """Base class for every error raised by this package."""


class SolverError(MeasureSteerError):
    """Numerical failure inside a solve (mapped to CLI exit code 3)."""


class ValidationError(MeasureSteerError):
    """Bad user input (mapped to CLI exit code 2)."""


class ZeroMass(SolverError):
    pass


class EmptyMeasure(ValidationError):
    pass


class TooLarge(ValidationError):
    pass


class DimensionMismatch(ValidationError):
    pass


class NonFinite(SolverError):
    pass


class GridTooSmall(ValidationError):
    pass


class IncompatibleGrids(ValidationError):
    pass


class AlphaOutOfRange(ValidationError):
    pass


class CflViolation(SolverError):
    def __init__(self, actual: float, limit: float):
        super().__init__(f"CFL number {actual:.6g} exceeds limit {limit:.6g}")
        self.actual = actual
        self.limit = limit


class DslError(ValidationError):
    pass


class DslSyntaxError(DslError):
    def __init__(self, offset: int, expected: str, src: str = ""):
        msg = f"syntax error at byte {offset}: expected {expected}"
        if src:
            msg += f"\n  {src}\n  {' ' * offset}^"
        super().__init__(msg)
        self.offset = offset
        self.expected = expected


class UnknownIdentifier(DslError):
    def __init__(self, name: str, offset: int):
        super().__init__(f"unknown identifier {name!r} at byte {offset}")
        self.name = name
        self.offset = offset


class DslDivisionByZero(SolverError):
    pass


class ScenarioParseError(ValidationError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line
        self.message = message


class ScenarioValidationError(ValidationError):
    def __init__(self, field: str, reason: str):
        super().__init__(f"{field}: {reason}")
        self.field = field
        self.reason = reason
