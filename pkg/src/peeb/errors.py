"""Shared exception hierarchy.

Every domain error raised by this package derives from PeebError so the CLI
can map them to exit code 1 while genuine bugs propagate normally.
"""


class PeebError(Exception):
    """Base class for all domain errors."""


class FormatError(PeebError):
    """Input could not be parsed in the documented format."""


class ValidationError(PeebError):
    """Parsed input violates a documented invariant."""


class NotFoundError(PeebError):
    """A referenced entity (class, part, version, id) does not exist."""


class ConflictError(PeebError):
    """The operation collides with existing state (duplicate name, stale base version)."""


class ConfigurationError(PeebError):
    """A required provider or setting is missing or inconsistent."""


class ShapeError(PeebError):
    """Array dimensions do not chain as required."""
