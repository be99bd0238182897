"""Exception hierarchy shared by every latfuse module."""

from typing import Optional, Sequence


class LatfuseError(Exception):
    """Base class for all errors raised by latfuse"""


class ShapeMismatchError(LatfuseError, ValueError):
    def __init__(self, message: str, axis: Optional[str] = None):
        super().__init__(message)
        self.axis = axis


class ChannelMismatchError(ShapeMismatchError):
    def __init__(self, message: str):
        super().__init__(message, axis="c")


class NonFiniteError(LatfuseError, ValueError):
    def __init__(self, message: str, index: Optional[Sequence[int]] = None):
        if index is not None:
            message = f"{message} (first at index {tuple(int(i) for i in index)})"
        super().__init__(message)
        self.index = index


class InvalidSpecError(LatfuseError, ValueError):
    pass


class LatentFormatError(LatfuseError, ValueError):
    """A file is not a latent in the supported NPY v1.0 subset"""


class BadMagicError(LatentFormatError):
    pass


class UnsupportedVersionError(LatentFormatError):
    pass


class CorruptHeaderError(LatentFormatError):
    pass


class UnsupportedDtypeError(LatentFormatError):
    pass


class FortranOrderError(LatentFormatError):
    pass


class RankError(LatentFormatError):
    pass


class TruncatedPayloadError(LatentFormatError):
    pass


class ManifestError(LatfuseError):
    pass


class GradCheckError(LatfuseError):
    pass


class GradCheckCapError(GradCheckError):
    pass


class GradCheckTieError(GradCheckError):
    pass


class DtypeMismatchError(LatfuseError, TypeError):
    pass


class TrailingDataError(LatentFormatError):
    pass


class UsageError(LatfuseError):
    """Bad command-line input"""


class EmptyLatentError(LatentFormatError):
    """Header declares a zero-sized axis"""
