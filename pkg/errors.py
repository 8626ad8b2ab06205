"""Exception hierarchy for the Seb transmission pipeline.

Every error also derives from the builtin that best describes it, so
callers may catch either ``SebCommError`` or the familiar builtin.
"""

from pathlib import Path
from typing import Optional


class SebCommError(Exception):
    """Base class for all pipeline errors."""


class IngestError(SebCommError, OSError):
    """An input image could not be read or has an unsupported format.

    Attributes:
        path: The offending file path.
    """

    def __init__(self, path, reason: str):
        self.path = str(path)
        super().__init__(f"{self.path}: {reason}")


class ParameterError(SebCommError, ValueError):
    """An argument is outside its valid range."""


class ShapeError(SebCommError, ValueError):
    """A tensor does not have the shape an operation requires."""


class StructuralError(SebCommError, ValueError):
    """A patch grid, usage map or codebook is internally inconsistent."""


class NumericError(SebCommError, ArithmeticError):
    """Input contains NaN or infinite values."""


class ProjectorStateError(SebCommError, RuntimeError):
    """A projector was used before it was initialized."""


class SingularChannelError(SebCommError, ZeroDivisionError):
    """Equalization was requested for a zero channel gain."""


class ContainerFormatError(SebCommError, ValueError):
    """A serialized container has a bad magic or is truncated."""


class IncompatibleCheckpointError(SebCommError, RuntimeError):
    """A checkpoint does not match the data or configuration it is used with."""


class TrainingDivergedError(SebCommError, RuntimeError):
    """The training loss became NaN.

    Attributes:
        step: Global step at which divergence was detected.
        snapshot_path: Where the diagnostic snapshot was written, if any.
    """

    def __init__(self, step: int, snapshot_path: Optional[Path] = None):
        self.step = step
        self.snapshot_path = snapshot_path
        where = f" (snapshot: {snapshot_path})" if snapshot_path else ""
        super().__init__(f"loss became NaN at step {step}{where}")
