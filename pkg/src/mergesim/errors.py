"""Exception types shared across the simulator."""

from __future__ import annotations


class ConfigError(ValueError):
    """Raised when an experiment configuration is invalid.

    The message always names the offending field so CLI users can fix the
    config file without reading source code.
    """

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"config field '{field}': {message}")


class ProtocolFault(RuntimeError):
    """A switch- or GPU-side protocol invariant was violated (strict mode)."""


class InternalFault(RuntimeError):
    """Internal consistency failure of the simulator itself (always fatal)."""
