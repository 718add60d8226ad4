"""Exception hierarchy.

Errors split into two families so the CLI can map them to exit codes:
``DataError`` (bad or missing inputs, exit 2) and ``NumericalError``
(solver or estimation failure, exit 3).
"""


class ErpMatchError(Exception):
    """Base class for all package errors."""


class DataError(ErpMatchError):
    pass


class NumericalError(ErpMatchError):
    pass


class ZeroVector(DataError, ValueError):
    pass


class MalformedFile(DataError):
    pass


class DimensionMismatch(DataError, ValueError):
    pass


class ImageTooSmall(DataError, ValueError):
    pass


class CameraInsideGeometry(DataError, ValueError):
    pass


class LevelMismatch(DataError, ValueError):
    pass


class EmptyList(DataError, ValueError):
    pass


class TooFewMatches(NumericalError):
    pass


class SolveFailure(NumericalError):
    pass


class DegenerateConfiguration(NumericalError):
    pass


class NoModelFound(NumericalError):
    pass


class AmbiguousDecomposition(NumericalError):
    pass
