"""Exception hierarchy shared by every her2flex module."""


class Her2FlexError(Exception):
    """Base class for all package errors."""


class MissingGrade(Her2FlexError, ValueError):
    pass


class UnpairedSample(Her2FlexError):
    pass


class GradeMismatch(Her2FlexError):
    pass


class TooFewSamples(Her2FlexError, ValueError):
    pass


class ArityViolation(Her2FlexError, ValueError):
    pass


class DegenerateDataset(Her2FlexError, ValueError):
    pass


class TooManyLevels(Her2FlexError, ValueError):
    pass


class ShapeMismatch(Her2FlexError, ValueError):
    pass


class SpatialMismatch(ShapeMismatch):
    pass


class LengthMismatch(ShapeMismatch):
    pass


class DimensionMismatch(ShapeMismatch):
    pass


class TooSmall(Her2FlexError, ValueError):
    pass


class NonFiniteLoss(Her2FlexError, FloatingPointError):
    pass


class ModalityMismatch(Her2FlexError, ValueError):
    pass


class EmptyBatch(Her2FlexError, ValueError):
    pass


class EmptyInput(Her2FlexError, ValueError):
    pass


class InvalidDistribution(Her2FlexError, ValueError):
    pass


class PerplexityTooHigh(Her2FlexError, ValueError):
    pass


class MissingCheckpoint(Her2FlexError, FileNotFoundError):
    pass


class CorruptCheckpoint(Her2FlexError):
    pass
