"""Exception types shared across the package."""


class HigmaeError(Exception):
    pass


class DimensionError(HigmaeError, ValueError):
    """Operand shapes are incompatible."""


class NumericError(HigmaeError, ArithmeticError):
    """Non-finite values reached an operation that cannot accept them."""


class ContractError(HigmaeError, RuntimeError):
    """A caller violated an operation's precondition."""


class IngestError(HigmaeError, ValueError):
    """A dataset file is missing or malformed."""


class ConfigError(HigmaeError, ValueError):
    """A configuration value is invalid or inconsistent with the data."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field
