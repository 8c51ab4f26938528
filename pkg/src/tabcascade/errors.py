"""Exception hierarchy.

The CLI maps each family onto an exit code: configuration problems exit 1,
data/schema problems exit 2 and numeric failures exit 3.
"""


class TabCascadeError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(TabCascadeError, ValueError):
    """Invalid configuration or specification values."""


class SpecError(ConfigError):
    """Invalid synthetic-cohort specification."""


class DataError(TabCascadeError, ValueError):
    """Problems with the data handed to a pipeline stage."""


class SchemaError(DataError):
    pass


class ParseError(DataError):
    def __init__(self, message, row=None, column=None):
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column!r}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)
        self.row = row
        self.column = column


class EmptyTableError(DataError):
    pass


class TrainingDataError(DataError):
    pass


class StratificationError(DataError):
    pass


class InputError(DataError):
    pass


class NumericError(TabCascadeError, ArithmeticError):
    """Numeric failure: singular systems, non-finite values, bad tapes."""


class DimensionError(NumericError, ValueError):
    pass


class BatchSizeError(NumericError, ValueError):
    pass


class LabelError(NumericError, ValueError):
    pass


class TapeError(NumericError, RuntimeError):
    pass


class MetricError(NumericError, ValueError):
    pass
