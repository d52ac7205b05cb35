"""Exception types shared across the package."""


class CloudMatchError(Exception):
    """Base class for all errors raised deliberately by this package."""


class DimensionError(CloudMatchError, ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(CloudMatchError, ValueError):
    """A documented precondition of an operation was violated."""


class InputError(CloudMatchError, ValueError):
    """Malformed user-supplied data (empty rasters, duplicate ids, ...)."""
