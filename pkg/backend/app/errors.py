"""
Exception types raised by the LipField pipeline.
"""
from typing import Optional


class LipFieldError(Exception):
    """Base class for pipeline errors."""


class MeshFormatError(LipFieldError, ValueError):
    """Raised when a mesh file cannot be parsed into a valid triangle mesh."""


class ContainerFormatError(LipFieldError, ValueError):
    """Raised when a motion sequence container is malformed."""


class TopologyMismatchError(LipFieldError):
    """Raised when a checkpoint or asset does not match the active topology."""

    def __init__(self, expected: Optional[str], found: Optional[str], source: str = "checkpoint"):
        self.expected = expected
        self.found = found
        self.source = source
        super().__init__(
            f"{source} was built for topology {found or 'unknown'}, "
            f"active topology is {expected or 'unknown'}"
        )


class TrainingDivergedError(LipFieldError):
    """Raised when a loss term becomes NaN or infinite during training."""

    def __init__(self, term: str, epoch: int, batch_index: int, value: float):
        self.term = term
        self.epoch = epoch
        self.batch_index = batch_index
        self.value = value
        super().__init__(
            f"Loss term '{term}' is {value} at epoch {epoch}, batch {batch_index}"
        )
