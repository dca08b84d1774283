"""Exception hierarchy shared by every memsifter module."""

from __future__ import annotations


class MemSifterError(Exception):
    """Base class for all domain errors raised by this package."""


class InvalidArgument(MemSifterError):
    """An argument violated a documented precondition."""


class EmptyHistory(MemSifterError):
    """Segmentation was asked to operate on an empty turn list."""


class ParseError(MemSifterError):
    """A persisted file or dataset record could not be parsed.

    ``location`` is a 1-based line number (bank/trajectory files) or a
    0-based task index (dataset files), depending on the caller.
    """

    def __init__(self, message: str, location: int | None = None):
        super().__init__(message)
        self.location = location


class IntegrityError(MemSifterError):
    """A structural invariant was violated (e.g. duplicate session ids)."""


class IoError(MemSifterError):
    """An underlying read or write failed."""


class TemplateError(MemSifterError):
    """A prompt template is missing or duplicates a required placeholder."""


class MissingRankingError(MemSifterError):
    """Proxy output contained no <ranking>...</ranking> block."""


class FormatError(MemSifterError):
    """Strict parsing rejected output that needed repairs.

    ``repairs`` lists the repair tags that lenient mode would have applied.
    """

    def __init__(self, message: str, repairs: list[str]):
        super().__init__(message)
        self.repairs = list(repairs)


class BackendError(MemSifterError):
    """A chat or embedding backend failed after exhausting its retry budget.

    ``kind`` is "transient" (retryable class of failure) or "fatal".
    ``status`` carries the HTTP status code when one exists.
    """

    def __init__(self, message: str, kind: str = "fatal", status: int | None = None):
        super().__init__(message)
        self.kind = kind
        self.status = status
        # set by ablation evaluation when a per-cutoff call fails
        self.cutoff_index: int | None = None

    @property
    def retryable(self) -> bool:
        return self.kind == "transient"


class ContextOverflowError(BackendError):
    """The provider rejected a request for exceeding its context window."""

    def __init__(self, message: str, status: int | None = None):
        super().__init__(message, kind="fatal", status=status)


class ShapeError(MemSifterError):
    """Parameter maps disagree on an entry's name or shape.

    ``entry`` names the offending parameter.
    """

    def __init__(self, message: str, entry: str | None = None):
        super().__init__(message)
        self.entry = entry


class ConfigError(MemSifterError):
    """A configuration value is out of range or of the wrong type.

    ``field`` names the offending configuration key.
    """

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field
