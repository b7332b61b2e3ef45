"""Exception types raised across the package."""


class Store3DError(Exception):
    """Base class; carries an exit code for the CLI."""

    exit_code = 3


class ConfigError(Store3DError):
    exit_code = 2


class DataError(Store3DError):
    exit_code = 3


class CheckFailure(Store3DError):
    exit_code = 4


class DegenerateInput(DataError):
    pass


class InsufficientTrack(DataError):
    pass


class EmptyDistribution(DataError):
    pass


class NonFiniteCost(DataError):
    pass


class NoGroundTruth(DataError):
    pass


class MissingLabels(DataError):
    pass


class ShapeMismatch(DataError):
    pass


class KTooLarge(DataError):
    pass


class EmptyTopK(DataError):
    pass


class IndexCollision(DataError):
    pass


class DomainError(DataError):
    pass
