"""Exception types raised across the package."""


class InclusiveFLError(Exception):
    """Base class; the CLI turns these into a machine-readable error line."""


class DimensionError(InclusiveFLError, ValueError):
    pass


class TopologyError(InclusiveFLError, ValueError):
    pass


class ConfigError(InclusiveFLError, ValueError):
    pass


class DataError(InclusiveFLError, ValueError):
    pass


class NumericError(InclusiveFLError, ArithmeticError):
    """A non-finite value reached the server optimizer."""
