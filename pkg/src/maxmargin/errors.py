"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Tensor or parameter shapes do not chain."""


class NumericError(RuntimeError):
    """A computation produced NaN/Inf. Carries the iterate index when known."""

    def __init__(self, message: str, iterate: int | None = None):
        super().__init__(message if iterate is None else f"{message} (iterate {iterate})")
        self.iterate = iterate


class DegenerateDirectionError(RuntimeError):
    """An attack direction collapsed to zero (zero gradient everywhere)."""


class IdxFormatError(ValueError):
    """Malformed IDX byte stream. Carries the byte offset of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class ConfigError(ValueError):
    """Invalid experiment configuration. Carries the offending key path."""

    def __init__(self, message: str, path: str = ""):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path
