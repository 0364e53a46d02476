"""Shared exception types."""


class ConfigError(Exception):
    """Invalid or missing experiment configuration; carries the offending field."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class NumericsError(RuntimeError):
    """Training produced a non-finite loss; message carries diagnostics."""
