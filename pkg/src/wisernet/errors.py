"""Exception types raised across the toolkit.

Every class derives from :class:`WiserError` so callers (the CLI in
particular) can catch one base and report ``type(exc).__name__`` as a
machine-parsable error class.
"""


class WiserError(Exception):
    """Base class for all toolkit errors."""


# file formats
class MalformedHeader(WiserError, ValueError):
    pass


class TruncatedPayload(WiserError, ValueError):
    pass


class IoFailure(WiserError, OSError):
    pass


class BadMagic(WiserError, ValueError):
    pass


class ShapeOverflow(WiserError, ValueError):
    pass


# shapes
class DimensionMismatch(WiserError, ValueError):
    pass


class ShapeMismatch(WiserError, ValueError):
    pass


class IncompatibleShape(WiserError, ValueError):
    pass


# kernel bank
class ParseError(WiserError, ValueError):
    pass


class WrongKernelCount(WiserError, ValueError):
    pass


class NonZeroSum(WiserError, ValueError):
    pass


class IndexOutOfRange(WiserError, IndexError):
    pass


# statistics
class BadConfig(WiserError, ValueError):
    pass


class DegenerateVariance(WiserError, ValueError):
    pass


class ZeroMeanDenominator(WiserError, ZeroDivisionError):
    pass


class TooSmall(WiserError, ValueError):
    pass


class TooFewSamples(WiserError, ValueError):
    pass


# network / training
class WrongBottomMode(WiserError, ValueError):
    pass


class DegenerateKernel(WiserError, ValueError):
    pass


class EmptyDataset(WiserError, ValueError):
    pass


class DivergedLoss(WiserError, FloatingPointError):
    pass


class NoInput(WiserError, FileNotFoundError):
    pass
