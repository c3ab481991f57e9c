"""Exception types raised across the package."""


class MapFuseError(Exception):
    """Base class for all package errors."""


class NonFinite(MapFuseError, ValueError):
    pass


class BehindCamera(MapFuseError, ValueError):
    pass


class DegenerateDirection(MapFuseError, ValueError):
    pass


class ParallelLines(MapFuseError, ValueError):
    pass


class ParseError(MapFuseError, ValueError):
    pass


class DegenerateRing(MapFuseError, ValueError):
    pass


class WindowOutOfBounds(MapFuseError, IndexError):
    pass


class LengthMismatch(MapFuseError, ValueError):
    pass


class ImageTooSmall(MapFuseError, ValueError):
    pass


class FullyClipped(MapFuseError, ValueError):
    pass


class EmptyProjection(MapFuseError, ValueError):
    pass


class NoVisibleEdges(MapFuseError, ValueError):
    pass


class OutOfRange(MapFuseError, ValueError):
    pass


class NonPositiveHeight(MapFuseError, ValueError):
    pass


class DimensionMismatch(MapFuseError, ValueError):
    pass


class PlacementFailure(MapFuseError, RuntimeError):
    pass


class ConfigError(MapFuseError, ValueError):
    pass


class DatasetError(MapFuseError, ValueError):
    pass
