"""Exception types shared across the package."""


class PrunelabError(Exception):
    """Base class for all package errors."""


class DimensionError(PrunelabError):
    """Tensor shapes are incompatible for the requested operation."""


class ContractError(PrunelabError):
    """A documented precondition or usage contract was violated."""


class ConfigError(PrunelabError):
    """Invalid configuration value or selector."""


class DataError(PrunelabError):
    """Invalid input data (tokens out of range, empty/too-small corpus)."""


class PatternError(PrunelabError):
    """A sparsity pattern does not fit the target tensor."""


class NumericalError(PrunelabError):
    """A numerical procedure failed (singular matrix, non-finite loss)."""
