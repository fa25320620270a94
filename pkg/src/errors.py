"""
Exception hierarchy shared by every stage and mapped to CLI exit codes
"""

from typing import Optional

from constants import config


class CsPartsError(Exception):
    """Base class for all errors raised by this package"""

    exit_code: int = config.EXIT_USAGE


class UsageError(CsPartsError, ValueError):
    """Invalid argument, configuration or call order"""

    exit_code = config.EXIT_USAGE


class DataFormatError(CsPartsError, ValueError):
    """Malformed image, tensor, manifest or metadata file"""

    exit_code = config.EXIT_DATA


class MissingArtifactError(CsPartsError, FileNotFoundError):
    """A required file or bundle member does not exist"""

    exit_code = config.EXIT_DATA


class NumericError(CsPartsError, ArithmeticError):
    """Non-finite values or a numeric procedure that failed"""

    exit_code = config.EXIT_NUMERIC


class TrainingDivergedError(NumericError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(
            f"training diverged at epoch {epoch} (loss={loss})"
        )
        self.epoch = epoch
        self.loss = loss


class StageError(CsPartsError):
    """Failure of a named pipeline stage, wrapping the original cause"""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage
        self.cause = cause
        self.exit_code = exit_code_for(cause)


def exit_code_for(error: Exception) -> int:
    """Map any exception to the CLI exit code contract"""
    code: Optional[int] = getattr(error, "exit_code", None)
    if code is not None:
        return code
    if isinstance(error, (FileNotFoundError, OSError)):
        return config.EXIT_DATA
    if isinstance(error, ArithmeticError):
        return config.EXIT_NUMERIC
    return config.EXIT_USAGE
