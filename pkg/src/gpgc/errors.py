"""Exception hierarchy shared by all gpgc modules."""


class GpgcError(Exception):
    """Base class for all gpgc errors."""


class DataFormatError(GpgcError):
    """Input files are structurally invalid or mutually inconsistent."""


class LabelError(GpgcError):
    """A label is outside {-1, +1}."""


class NumericError(GpgcError):
    """A non-finite value appeared where finite data is required."""


class BalanceError(GpgcError):
    """Class balancing requested on a single-class dataset."""


class DimensionError(GpgcError):
    """Vector or matrix dimensions do not match the expected shape."""


class DomainError(GpgcError):
    """An argument violates a value constraint (positivity, symmetry)."""


class SingularityError(GpgcError):
    """A positive-definite factorization failed; usually NaN contamination."""


class StaleCacheError(GpgcError):
    """A solved cache was used with hyperparameters it was not built for."""


class InitializationError(GpgcError):
    """Training objective is non-finite at the starting point."""


class SizeError(GpgcError):
    """Dense reference routines called above their size guard."""


class WorkerLostError(GpgcError):
    """A remote worker disconnected or could not be reached."""


class RemoteError(GpgcError):
    """A remote worker reported an error for a query."""
