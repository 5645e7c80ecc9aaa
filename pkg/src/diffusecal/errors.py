"""Exception hierarchy shared by all pipeline stages.

The CLI maps these onto distinct exit codes (see cli.EXIT_*): configuration
problems, dataset/validation failures, and degenerate-data conditions are
reported separately so scripted callers can tell them apart.
"""


class CalibrationError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(CalibrationError):
    """Invalid configuration value or inconsistent parameter combination."""


class DatasetError(CalibrationError):
    """Dataset or result-file validation failure (missing/malformed input)."""


class ConsistencyError(CalibrationError):
    """Two objects that must agree (shape, scan index, grid) do not."""


class DegenerateMapError(CalibrationError):
    """An all-zero or all-invalid map for which the operation is undefined."""


class NoSignalError(DegenerateMapError):
    """No above-background signal anywhere in the dataset."""


class UndefinedIouError(DegenerateMapError):
    """IoU of two empty support masks is undefined."""
