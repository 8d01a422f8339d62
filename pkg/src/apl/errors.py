"""Exception hierarchy shared by every stage."""


class AplError(Exception):
    """Base class for all errors raised by this package."""


class ImageFormatError(AplError, ValueError):
    pass


class UnsupportedBitDepthError(ImageFormatError):
    pass


class UnsupportedChannelsError(ImageFormatError):
    pass


class DimensionMismatchError(AplError, ValueError):
    pass


class PatchTooLargeError(AplError, ValueError):
    pass


class PatchTooSmallError(AplError, ValueError):
    pass


class NoSunlitReferenceError(AplError, ValueError):
    pass


class FeatureFileError(AplError, ValueError):
    pass


class MissingKeyError(FeatureFileError):
    pass


class DuplicateKeyError(FeatureFileError):
    pass


class LengthMismatchError(FeatureFileError):
    pass


class InsufficientDataError(AplError, ValueError):
    pass


class OutOfExtentError(AplError, ValueError):
    pass


class EmptyPositiveSetError(AplError, ValueError):
    pass


class LabelingRuleError(AplError, ValueError):
    pass


class DegenerateLabelsError(AplError, ValueError):
    pass


class DegeneratePolygonError(AplError, ValueError):
    pass


class WindowStepError(AplError, ValueError):
    pass


class TooCrowdedError(AplError, RuntimeError):
    pass


class StageError(AplError, RuntimeError):
    """A pipeline stage failed; carries the stage name."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause
