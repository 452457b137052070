"""Exception taxonomy shared across the package.

Anything raised on bad user input that has a well-defined category lives
here; garden-variety argument misuse still raises plain ValueError.
"""

from __future__ import annotations


class BroadCAMError(Exception):
    """Base class for all package-specific errors."""


class MissingLayerError(BroadCAMError):
    """A requested layer index is absent from a sample's feature stack."""


class DuplicateLayerError(BroadCAMError):
    """The same layer index was selected more than once."""


class NonFiniteInputError(BroadCAMError):
    """An input tensor contains NaN or infinity."""


class UnsupportedDtypeError(BroadCAMError):
    """An on-disk array has a dtype outside float/int/bool."""


class NotSingleChannelError(BroadCAMError):
    """A mask image is not single-channel 8-bit."""


class DuplicateSampleError(BroadCAMError):
    """A sample id occurs more than once in a label table or split."""


class EmptyLabelError(BroadCAMError):
    """A sample has no foreground class marked present."""


class OutOfRangeError(BroadCAMError):
    """A mask pixel value falls outside the declared class range."""


class ShapeMismatchError(BroadCAMError):
    """Two inputs that must agree in shape do not."""


class SingularSystemError(BroadCAMError):
    """A ridge system with lambda == 0 has a singular normal matrix."""


class EmptySubsetError(BroadCAMError):
    """A subsampling proportion rounds to zero samples."""


class DivergedError(BroadCAMError):
    """Gradient-descent training produced a non-finite loss."""

    def __init__(self, epoch: int, message: str | None = None):
        self.epoch = int(epoch)
        super().__init__(message or f"training loss became non-finite at epoch {self.epoch}")
