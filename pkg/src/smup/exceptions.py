"""Exception hierarchy shared by every smup module."""


class SmupError(Exception):
    """Base class for all smup errors."""


class InvalidInputError(SmupError, ValueError):
    """Inputs violate a precondition (shapes, ranges, empty data)."""


class GridMismatchError(InvalidInputError):
    """Rasters that must share one grid do not."""


class RefusalError(InvalidInputError):
    """An operation declines to run on degenerate input."""


class MalformedInputError(SmupError, ValueError):
    """A file or document could not be parsed."""
