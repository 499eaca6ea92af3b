"""Exception hierarchy shared across the package.

Exit-code mapping used by the CLI: ConfigError -> 2, DataError -> 3,
NumericError -> 4.
"""


class FgadError(Exception):
    """Base class for all package errors."""


class ConfigError(FgadError):
    """Invalid or unparseable run configuration."""


class DataError(FgadError):
    """Bad input data: alignment, parsing, or precondition failures."""


class NumericError(FgadError):
    """Numeric failure during training or scoring (non-finite loss, degenerate populations)."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
