"""Exception hierarchy shared by all clutterlab modules.

ValidationError covers bad inputs and violated invariants (CLI exit 1);
DatasetError covers anything touching persisted data (CLI exit 2).
"""

from __future__ import annotations


class ClutterlabError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(ClutterlabError, ValueError):
    """Input violates a documented precondition or invariant."""


class EmptyMaskError(ValidationError):
    """A mask with at least one true pixel was required."""


class EmptyFusionError(ValidationError):
    """Mask and box annotations do not overlap; the annotation is rejected."""


class DegenerateGridError(ValidationError):
    """Grid size exceeds what the canvas can hold."""


class EmptyRegistryError(ValidationError):
    """No class with source images is available."""


class DuplicateClassError(ValidationError):
    """Class name already registered."""


class UnregisteredClassError(ValidationError):
    """Class id is not present in the registry."""


class ConfigError(ValidationError):
    """Configuration value is missing or inconsistent."""


class DatasetError(ClutterlabError):
    """Problem reading or writing persisted samples."""

    def __init__(self, message: str, path: str | None = None):
        super().__init__(message if path is None else f"{message}: {path}")
        self.path = path


class MissingSampleError(DatasetError):
    """Requested sample id has no files on disk or entry in the cache."""


class MalformedRecordError(DatasetError):
    """A JSON-lines record failed to parse."""

    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        detail = message if line is None else f"{message} (line {line})"
        super().__init__(detail, path)
        self.line = line


class BitDepthError(DatasetError):
    """A PNG file does not have the bit depth the format requires."""


class MemoryBudgetError(DatasetError):
    """Decoded dataset would not fit in the configured memory budget."""

    def __init__(self, required_bytes: int, available_bytes: int):
        super().__init__(
            f"prefetch needs {required_bytes} bytes but the budget allows "
            f"{available_bytes} bytes"
        )
        self.required_bytes = required_bytes
        self.available_bytes = available_bytes
