"""Shared exception types."""


class InputError(ValueError):
    """Caller-supplied arguments violate an operation's preconditions."""


class LayoutMismatchError(InputError):
    """Two parameter vectors (or a vector and a model) disagree on layout."""


class FormatError(ValueError):
    """A binary file is malformed; message carries the byte offset where parsing failed."""


class ConfigError(ValueError):
    """Experiment configuration is invalid; message carries the offending key path."""
