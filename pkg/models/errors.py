"""
Error types raised by the engine.

Each error carries a machine-parsable ``code`` and the process ``exit_code``
the command line surface uses when the error escapes a subcommand.
"""

from typing import Optional


class EngineError(Exception):
    """Base exception for all engine errors."""

    code: str = "ENGINE_ERROR"
    exit_code: int = 1

    def __init__(self, message: str, code: Optional[str] = None):
        super().__init__(message)
        if code is not None:
            self.code = code

    @property
    def message(self) -> str:
        return str(self)


class ConfigError(EngineError):
    """Invalid run configuration or command line flags."""

    code = "CONFIG_ERROR"
    exit_code = 2


class DataError(EngineError):
    """Input data violates the documented format or a structural invariant."""

    code = "DATA_ERROR"
    exit_code = 3


class NumericalError(EngineError):
    """A numerical precondition failed or the computation produced non-finite values."""

    code = "NUMERICAL_ERROR"
    exit_code = 4


class MissingArtifacts(EngineError):
    """A subcommand needs output files that earlier subcommands did not produce."""

    code = "MISSING_ARTIFACTS"
    exit_code = 5


# Graph construction

class DuplicateEdge(DataError):
    code = "DUPLICATE_EDGE"


class SelfLoop(DataError):
    code = "SELF_LOOP"


class IndexOutOfRange(DataError):
    code = "INDEX_OUT_OF_RANGE"


class DisconnectedGraph(DataError):
    code = "DISCONNECTED_GRAPH"


class LengthMismatch(DataError):
    code = "LENGTH_MISMATCH"


# Panel ingestion

class MalformedRow(DataError):
    code = "MALFORMED_ROW"


class DuplicateCell(DataError):
    code = "DUPLICATE_CELL"


class RangeError(DataError):
    code = "RANGE_ERROR"


# Posterior summaries and evaluation

class MissingTrajectory(DataError):
    code = "MISSING_TRAJECTORY"


class EmptyState(DataError):
    code = "EMPTY_STATE"


class InvalidScenario(DataError):
    code = "INVALID_SCENARIO"


class InsufficientObserved(DataError):
    code = "INSUFFICIENT_OBSERVED"


class CellNotHeldOut(DataError):
    code = "CELL_NOT_HELD_OUT"


class PlanMismatch(DataError):
    code = "PLAN_MISMATCH"


# Numerics

class NonFinite(NumericalError):
    code = "NON_FINITE"


class OrderViolation(NumericalError):
    code = "ORDER_VIOLATION"


class InvariantViolation(NumericalError):
    code = "INVARIANT_VIOLATION"


class ConstraintViolation(NumericalError):
    code = "CONSTRAINT_VIOLATION"


class InitializationFailure(NumericalError):
    code = "INITIALIZATION_FAILURE"


class DegenerateInput(NumericalError):
    code = "DEGENERATE_INPUT"
