"""Exception hierarchy shared by every service.

Services raise these; only the command-line dispatcher turns them into
process exit codes.
"""

from typing import Optional

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class ToFeError(Exception):
    """Base class for all toolkit errors."""

    exit_code: int = EXIT_DATA


class ShapeError(ToFeError, ValueError):
    """Tensor dimensions do not agree with what an operation requires."""


class TokenIndexError(ToFeError, IndexError):
    """A row index falls outside the tensor it addresses."""


class ContractViolation(ToFeError, ValueError):
    """A precondition of an operation was not met by the caller."""


class ConfigError(ToFeError):
    """Invalid or missing configuration (settings, plan, checkpoint pairing)."""


class DataError(ToFeError):
    """Dataset content is invalid (for example a label out of range)."""


class DatasetParseError(DataError):
    """Malformed dataset file.

    Args:
        message: What went wrong
        offset: Byte offset where parsing stopped
        record_index: Index of the record being read, if any
    """

    def __init__(self, message: str, offset: int, record_index: Optional[int] = None):
        self.offset = offset
        self.record_index = record_index
        where = f"byte offset {offset}"
        if record_index is not None:
            where = f"record {record_index}, {where}"
        super().__init__(f"{message} ({where})")


class CheckpointError(ToFeError):
    """Checkpoint file could not be read or does not match expectations."""


class BadMagicError(CheckpointError):
    """File does not start with the checkpoint magic bytes."""


class VersionMismatchError(CheckpointError):
    """Checkpoint format version is not supported by this build."""


class CheckpointConfigError(CheckpointError, ConfigError):
    """Checkpoint tensors or metadata disagree with the requested config."""


class NumericError(ToFeError, ArithmeticError):
    """NaN or Inf appeared where finite values are required."""

    exit_code = EXIT_NUMERIC
