"""Exception hierarchy shared by every module."""


class UnlearnError(Exception):
    """Base class for all package errors."""


class DimensionMismatch(UnlearnError, ValueError):
    pass


class ZeroMatrix(UnlearnError, ValueError):
    pass


class InvalidConfig(UnlearnError, ValueError):
    pass


class AlreadyAttached(UnlearnError):
    pass


class NoAdapters(UnlearnError):
    pass


class UnknownClass(UnlearnError, ValueError):
    pass


class CorruptCheckpoint(UnlearnError):
    pass


class VersionMismatch(UnlearnError):
    pass


class EmptyBatch(UnlearnError, ValueError):
    pass


class EmptySplit(UnlearnError, ValueError):
    pass


class EmptyTestSet(UnlearnError, ValueError):
    pass


class DidNotConverge(UnlearnError):
    pass


class MeanPlacementFailed(UnlearnError):
    pass


class ParseError(UnlearnError, ValueError):
    pass


class NonContiguousLabels(UnlearnError, ValueError):
    pass


class MissingClassInSplit(UnlearnError, ValueError):
    pass


class OverlappingSchedule(UnlearnError, ValueError):
    pass


class ClassNotInDataset(UnlearnError, ValueError):
    pass


class NothingRemains(UnlearnError, ValueError):
    pass


class ValidationError(UnlearnError, ValueError):
    pass
