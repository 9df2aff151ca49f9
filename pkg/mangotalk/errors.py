"""Exception types shared by the mangotalk modules.

Plain argument errors are reported with the builtin `ValueError`; the classes below mark
the cases callers (in particular the command line interface) need to tell apart.
"""


class ConfigurationError(KeyError):
    """An identifier, configuration value or checkpoint does not fit the request."""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


class FormatError(ValueError):
    """A file is missing or cannot be decoded."""


class ValidationError(ValueError):
    """Decoded data violates a structural invariant, e.g. inconsistent frame counts."""
