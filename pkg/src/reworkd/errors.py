"""Exception hierarchy.

Validation errors (bad input, bad parameters) map to CLI exit code 1,
estimation errors (numerical or statistical failures) to exit code 2.
"""

from __future__ import annotations


class ReworkError(Exception):
    """Base class for all package errors."""


class ValidationError(ReworkError, ValueError):
    """Input or parameter failed validation."""


class EstimationError(ReworkError):
    """A statistical or numerical step could not be completed."""


class SchemaError(ValidationError):
    def __init__(self, column: str, message: str | None = None):
        self.column = column
        super().__init__(message or f"missing column {column!r}")


class ParseError(ValidationError):
    def __init__(self, row: int, column: str, value: str):
        self.row, self.column, self.value = row, column, value
        super().__init__(f"row {row}, column {column!r}: cannot parse {value!r} as a number")


class DataValidationError(ValidationError):
    def __init__(self, message: str, row: int | None = None):
        self.row = row
        super().__init__(message if row is None else f"row {row}: {message}")


class ParameterError(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


class ShapeError(ValidationError):
    pass


class FeatureError(ValidationError):
    pass


class DependencyError(ValidationError):
    """A CLI stage was run before the stage that produces its inputs."""

    def __init__(self, missing: str, required_stage: str):
        self.missing, self.required_stage = missing, required_stage
        super().__init__(f"missing {missing}; run the {required_stage!r} subcommand first")


class DegenerateRecordError(EstimationError):
    pass


class DegenerateCovarianceError(EstimationError):
    pass


class DegenerateClassError(EstimationError):
    pass


class DegenerateSupportError(EstimationError):
    pass


class OverlapError(EstimationError):
    pass


class FoldDegeneracyError(EstimationError):
    def __init__(self, fold: int, message: str):
        self.fold = fold
        super().__init__(f"fold {fold}: {message}")


class SingularityError(EstimationError):
    pass


class EstimandUndefinedError(EstimationError):
    pass


class ExtrapolationError(EstimationError):
    pass


class UnsupportedDepthError(ValidationError):
    pass


class OracleUnavailableError(ReworkError):
    pass


class TuningError(EstimationError):
    pass


class StageError(ReworkError):
    """Wraps a failure inside a pipeline stage, tagging the stage name."""

    def __init__(self, stage: str, cause: Exception):
        self.stage, self.cause = stage, cause
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")


class EmptyAdjustmentError(ValidationError):
    """Omitting the requested columns would leave no adjustment variables."""
