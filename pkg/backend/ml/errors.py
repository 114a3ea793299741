"""
Exception hierarchy for the StyleBridge stack.

Messages are written to be read in a CLI log line; callers that need to
react programmatically use the attached attributes (line, key, name).
"""

from typing import Optional


class StyleBridgeError(Exception):
    """Base class for every error raised by this package."""


class ConfigurationError(StyleBridgeError, ValueError):
    """Invalid configuration value, schedule range, or model wiring."""

    def __init__(self, message: str, key: Optional[str] = None, line: Optional[int] = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.key = key
        self.line = line


class DimensionError(StyleBridgeError, ValueError):
    """Array shapes do not agree."""


class NumericError(StyleBridgeError, ArithmeticError):
    """A NaN/Inf appeared where finite values are required."""

    def __init__(self, message: str, name: Optional[str] = None):
        super().__init__(message)
        self.name = name


class IndexRangeError(StyleBridgeError, IndexError):
    """Timestep or latent index outside its valid range."""


class EstimationError(StyleBridgeError):
    """Factor estimation impossible (e.g. an all-zero spectrogram)."""


class StateError(StyleBridgeError):
    """Operation requires a trained model or an existing checkpoint."""


class ContractViolationError(StyleBridgeError):
    """Gradients reached parameters that must stay frozen or detached."""


class IntegrityError(StyleBridgeError):
    """Checkpoint checksum or layout mismatch."""


class UsageError(StyleBridgeError):
    """Unknown CLI command or missing arguments."""
