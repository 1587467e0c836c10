"""Exception hierarchy shared by the library and the CLI.

The CLI maps each family onto a stable exit code: configuration problems
exit 1, data problems exit 2, failures while running an arm exit 3.
"""


class SparseRLError(Exception):
    exit_code = 3


class ConfigError(SparseRLError):
    """One or more configuration violations; ``violations`` lists all of them."""

    exit_code = 1

    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class DataError(SparseRLError):
    exit_code = 2


class DimensionError(DataError):
    pass


class DatasetFormatError(DataError):
    pass


class TruncatedRecordError(DatasetFormatError):
    def __init__(self, record, message=None):
        self.record = record
        super().__init__(message or f"truncated dataset: record {record} is missing or incomplete")


class RegimeError(DataError):
    pass


class EmptyFilterError(DataError):
    """Filtering left nothing to train on."""


class ShapeError(ValueError):
    pass
