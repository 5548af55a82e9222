"""Exception hierarchy shared by every module.

The CLI maps each class to a fixed exit code, so new failure modes should
subclass one of these rather than raising bare ``ValueError``.
"""

from __future__ import annotations


class CodeMergeError(Exception):
    """Base class for all library errors."""


class FormatError(CodeMergeError):
    """A CMCK/CMIX file is malformed: bad magic, version, truncation, NaN."""


class StorageError(CodeMergeError):
    """Reading or writing a file failed at the OS level."""

    def __init__(self, message: str, path=None):
        super().__init__(message if path is None else f"{message}: {path}")
        self.path = path


class MissingReferenceError(StorageError):
    """A codebook entry points to a checkpoint file that does not exist."""


class ParameterError(CodeMergeError, ValueError):
    """An argument violates an operation's precondition."""


class StructuralError(ParameterError):
    """Checkpoints disagree on parameter names or shapes."""


class StateError(CodeMergeError):
    """The object is in a state where the operation is undefined (e.g. empty)."""


class NumericalError(CodeMergeError, ArithmeticError):
    """A computation diverged or hit a singular system."""


class ConfigError(ParameterError):
    """An invalid simulator or CLI configuration."""
