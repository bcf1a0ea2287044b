"""Error types shared across the package."""


class ParseError(ValueError):
    """Raised when an input file cannot be parsed; message names the line."""


class DataError(ValueError):
    """Raised on structurally valid input that violates a data contract."""


class ConfigError(ValueError):
    """Raised on invalid configuration values."""


class GuardError(ValueError):
    """Raised when an exact/enumeration backend is asked for an instance too large."""


class DataIntegrityError(ValueError):
    """Raised when two artifacts that must come from the same pipeline disagree."""
