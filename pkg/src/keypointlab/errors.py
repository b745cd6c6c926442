"""Exception types shared across the package."""


class KeypointLabError(Exception):
    pass


class DegeneratePointError(KeypointLabError, ValueError):
    """A point maps to (or sits on) the line at infinity."""

    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


class InsufficientDataError(KeypointLabError, ValueError):
    pass


class DegenerateConfigurationError(KeypointLabError, ValueError):
    pass


class ParseError(KeypointLabError, ValueError):
    def __init__(self, message: str, path=None):
        super().__init__(message if path is None else f"{path}: {message}")
        self.path = path


class UndefinedMetricError(KeypointLabError, ValueError):
    """Metric has no defined value for the given input (e.g. no matches)."""


class DegenerateTrackError(KeypointLabError, ValueError):
    pass


class CheiralityError(KeypointLabError, ValueError):
    pass


class DegenerateGeometryError(KeypointLabError, ValueError):
    pass


class TrainingDivergedError(KeypointLabError, RuntimeError):
    def __init__(self, message: str, last_checkpoint=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


class NumericalDomainError(KeypointLabError, ValueError):
    """A value fell outside the domain of a log/sqrt/factorization."""
