"""Exception types raised across the package."""


class PsstError(Exception):
    pass


class DimensionError(PsstError, ValueError):
    pass


class DomainError(PsstError, ValueError):
    pass


class DegenerateInputError(PsstError, ValueError):
    pass


class ContractError(PsstError, ValueError):
    pass


class SizeError(PsstError, ValueError):
    pass


class ConfigError(PsstError, ValueError):
    pass


class CheckpointError(PsstError, IOError):
    pass


class NumericalError(PsstError, FloatingPointError):
    """A non-finite value appeared in a forward or backward pass."""
