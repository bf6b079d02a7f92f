"""Exception hierarchy shared by every subsystem.

The CLI maps these onto exit codes: config problems exit 2, data problems
exit 3, numeric aborts exit 4.
"""


class OmdetError(Exception):
    """Base class for all package errors."""


class ConfigError(OmdetError, ValueError):
    """Invalid configuration value, shape contract or architecture setting."""


class DataError(OmdetError):
    """Malformed or missing input data (files, datasets, annotations)."""


class FormatError(DataError, ValueError):
    """A binary or JSON file does not follow its documented layout."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class EmbeddingLookupError(DataError, KeyError):
    """A word has no vector in a file-backed embedding provider."""

    def __init__(self, word):
        super().__init__(f"no embedding for word {word!r}")
        self.word = word

    def __str__(self):
        return self.args[0]


class NumericError(OmdetError, FloatingPointError):
    """A primitive produced NaN or Inf."""


class UsageError(OmdetError, RuntimeError):
    """An API was called outside its preconditions."""


class ShapeError(UsageError, ValueError):
    """Operand shapes are incompatible for a primitive."""
