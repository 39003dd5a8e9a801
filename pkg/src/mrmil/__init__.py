"""Multi-resolution attention MIL: detect at 5x, select, classify at 10x."""

__version__ = "0.1.0"


class MrmilError(Exception):
    """Base error; ``code`` is a stable identifier used in CLI error JSON."""

    code = "error"


class ConfigError(MrmilError, ValueError):
    code = "config_error"


class InputError(MrmilError, ValueError):
    code = "input_error"


class FormatError(MrmilError, ValueError):
    code = "format_error"


class SchemaMismatch(MrmilError, ValueError):
    code = "schema_mismatch"


class MissingArtifact(MrmilError, FileNotFoundError):
    code = "missing_artifact"
