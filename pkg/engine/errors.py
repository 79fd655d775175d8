"""
Exception hierarchy for the LQF engine.

Every failure the engine raises on purpose derives from LqfError, so the
command line can map it to an exit code in one place.
"""

from typing import Optional


class LqfError(Exception):
    """Base class for all engine errors."""

    exit_code = 1


class ContractError(LqfError):
    """A caller broke a precondition (shape, index, state or value range)."""

    exit_code = 1


class ConfigError(ContractError):
    """
    A configuration document or override violates the schema.

    Args:
        key: The offending dotted key
        message: What is wrong with it
    """

    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


class GuardError(ContractError):
    """A dense materialization was requested beyond the size guard."""


class NumericError(LqfError):
    """Non-finite values or a numerically invalid intermediate."""

    exit_code = 2


class SingularSystemError(NumericError):
    """
    A linear system could not be factorized.

    Args:
        message: Description of the failure
        rank: Estimated numerical rank, when known
    """

    def __init__(self, message: str, rank: Optional[int] = None):
        self.rank = rank
        if rank is not None:
            message = f"{message} (estimated rank {rank})"
        super().__init__(message)


class DivergenceError(NumericError):
    """
    Training blew up.

    Args:
        step: Optimizer step at which divergence was detected
        loss: Loss value observed at that step
    """

    def __init__(self, step: int, loss: float):
        self.step = step
        self.loss = loss
        super().__init__(f"training diverged at step {step} (loss={loss:.6g})")


class StorageError(LqfError):
    """
    Reading or writing a file failed.

    Args:
        path: File involved
        message: Description of the failure
        line: 1-based line number for text formats, when known
    """

    exit_code = 3

    def __init__(self, path, message: str, line: Optional[int] = None):
        self.path = str(path)
        self.line = line
        where = f"{self.path}:{line}" if line is not None else self.path
        super().__init__(f"{where}: {message}")


def exit_code_for(exc: BaseException) -> int:
    """
    Map an exception to the process exit code.

    Args:
        exc: The exception that ended the run

    Returns:
        1 for contract violations, 2 for numeric failures, 3 for I/O failures
    """
    if isinstance(exc, LqfError):
        return exc.exit_code
    if isinstance(exc, OSError):
        return 3
    return 1


def require(condition: bool, message: str) -> None:
    """Raise ContractError with `message` unless `condition` holds."""
    if not condition:
        raise ContractError(message)
