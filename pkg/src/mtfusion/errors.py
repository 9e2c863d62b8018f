"""Exception hierarchy. Each top-level class maps to a CLI exit code."""


class MtfusionError(Exception):
    exit_code = 1
    kind = "error"


class ConfigError(MtfusionError):
    exit_code = 2
    kind = "config"


class DataError(MtfusionError):
    exit_code = 3
    kind = "data"


class SchemaError(DataError):
    kind = "schema"


class ParseError(DataError):
    kind = "parse"


class EmptyInputError(DataError):
    kind = "empty_input"


class ManifestError(DataError):
    kind = "manifest"


class StageDependencyError(MtfusionError):
    exit_code = 4
    kind = "stage_dependency"


class ShapeError(MtfusionError, ValueError):
    kind = "shape"


class UndefinedMetricError(MtfusionError, ValueError):
    """Metric denominator is zero (e.g. CCC of two equal constant vectors)."""

    kind = "undefined_metric"


class InsufficientDataError(MtfusionError, ValueError):
    kind = "insufficient_data"
