"""Exception hierarchy. Each class carries the CLI error category and exit code."""


class PkgEventsError(Exception):
    category = "internal"
    exit_code = 4


class ConfigError(PkgEventsError, ValueError):
    category = "invalid_config"
    exit_code = 3


class EmptyDatasetError(ConfigError):
    category = "empty_dataset"


class MissingArtifactError(PkgEventsError, FileNotFoundError):
    category = "missing_input"
    exit_code = 2


class InvariantError(PkgEventsError, AssertionError):
    category = "invariant_violation"
    exit_code = 4


class ShapeError(PkgEventsError, ValueError):
    category = "shape_mismatch"
    exit_code = 4


class ParseError(PkgEventsError, ValueError):
    category = "parse_error"
    exit_code = 3
