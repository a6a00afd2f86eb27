"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


class NumericError(ArithmeticError):
    """A computation produced NaN or Inf."""


class OracleError(RuntimeError):
    """A test oracle was invoked outside its domain of validity."""


class ContractError(RuntimeError):
    """A caller violated an interface precondition."""
