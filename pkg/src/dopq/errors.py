"""Exception hierarchy shared across the package."""


class DopqError(Exception):
    """Base class for all errors raised by dopq."""


class DimensionError(DopqError, ValueError):
    pass


class DomainError(DopqError, ValueError):
    pass


class ParameterError(DopqError, ValueError):
    """Quantizer parameters violate their invariants."""


class ConfigError(DopqError, ValueError):
    """Invalid configuration; ``field`` names the offending key path."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")
