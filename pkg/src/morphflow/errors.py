"""Exception types shared across the package."""


class MorphflowError(Exception):
    """Base class for all package-specific errors."""


class EmptyCloud(MorphflowError):
    pass


class DegenerateCloud(MorphflowError):
    pass


class KTooLarge(MorphflowError):
    pass


class MTooLarge(MorphflowError):
    pass


class CoordinateOverflow(MorphflowError):
    pass


class GridTooFine(MorphflowError):
    pass


class CloudSmallerThanWindow(MorphflowError):
    pass


class ShapeMismatch(MorphflowError):
    pass


class NonScalarOutput(MorphflowError):
    pass


class SizeMismatch(MorphflowError):
    pass


class NonFinite(MorphflowError):
    pass


class TooFewSamples(MorphflowError):
    pass


class MissingLabel(MorphflowError):
    pass


class RecordMismatch(MorphflowError):
    pass


class GraphMismatch(MorphflowError):
    pass


class ZeroVector(MorphflowError):
    pass


class PresetMismatch(MorphflowError):
    pass


class CorruptCheckpoint(MorphflowError):
    pass


class EmptyAfterFiltering(MorphflowError):
    pass


class NonFiniteLoss(MorphflowError):
    pass
