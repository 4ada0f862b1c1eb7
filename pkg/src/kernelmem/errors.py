"""Exception types shared across the package."""

from __future__ import annotations


class KernelMemError(Exception):
    """Base class for all package errors."""


class ConfigError(KernelMemError):
    """Invalid configuration (bad values or unknown keys)."""

    def __init__(self, message: str, keys: list[str] | None = None) -> None:
        super().__init__(message)
        self.keys = list(keys or [])


class DuplicateEntryError(KernelMemError):
    """An entry id was appended twice to the same bank."""


class MemoryFormatError(KernelMemError):
    """A persisted memory file could not be parsed."""

    def __init__(self, message: str, line: int) -> None:
        super().__init__(f"line {line}: {message}")
        self.line = line


class TemplateError(KernelMemError):
    """A prompt template references a placeholder with no value."""


class InfraError(KernelMemError):
    """Retryable infrastructure failure in a generator or verifier backend.

    ``kind`` distinguishes the failure source, e.g. ``timeout``, ``exit``,
    ``parse``, ``network`` or ``http``.
    """

    def __init__(self, message: str, kind: str = "infra", stderr: str = "") -> None:
        super().__init__(message)
        self.kind = kind
        self.stderr = stderr

    def to_dict(self) -> dict[str, str]:
        return {"kind": self.kind, "message": str(self), "stderr": self.stderr}
