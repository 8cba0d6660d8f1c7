"""Shared exception types."""


class FormatError(ValueError):
    """Raised when a serialized artifact (fingerprint table, behavior log,
    sample file, checkpoint) does not match its documented layout."""


class NumericError(ArithmeticError):
    """Raised when a forward pass or training step produces a non-finite
    value.  The message names the stage that produced it."""
