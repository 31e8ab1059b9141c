#errors.py
"""
Exception hierarchy for the DeepFuse toolkit.

Library code raises these; only the command-line entry point turns them
into exit codes.
"""

from typing import Any, Dict, Optional


class DeepFuseError(Exception):
    """Root of every error raised by the toolkit"""


class ConfigurationError(DeepFuseError, ValueError):
    """Invalid shapes, channel chains, configs or missing training targets"""


class InputError(DeepFuseError, ValueError):
    """Unreadable or mismatched images and malformed manifests"""


class UsageError(DeepFuseError, RuntimeError):
    """API misuse, e.g. a stale activation cache"""


class NumericError(DeepFuseError, ArithmeticError):
    """
    Non-finite values met during a computation

    Args:
        message: Human readable description
        context: Optional diagnostics (step, patch id, window coordinates)
    """

    def __init__(self, message: str, context: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.context = dict(context or {})


class CheckpointError(DeepFuseError, IOError):
    """Base class for checkpoint read/write failures"""


class CheckpointVersionError(CheckpointError):
    """Checkpoint written by an unsupported format version"""


class CheckpointChecksumError(CheckpointError):
    """Checkpoint payload does not match its stored checksum"""


class CheckpointTruncatedError(CheckpointChecksumError):
    """Checkpoint ends before its declared payload"""


class CheckpointWriteError(CheckpointError):
    """Checkpoint could not be written (disk full, permissions)"""
