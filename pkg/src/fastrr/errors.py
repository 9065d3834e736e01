"""Exception types shared across the package.

Every error raised by the library derives from :class:`FastrrError` and
carries a stable ``code`` string so the CLI can emit machine-readable
diagnostics.
"""


class FastrrError(Exception):
    """Base class for all package errors."""

    code = "error"


class InvalidDesignError(FastrrError):
    """Design parameters are out of range or mutually inconsistent."""

    code = "invalid_design"


class DimensionError(FastrrError):
    """Array shapes do not conform."""

    code = "dimension_mismatch"


class SingularCovarianceError(FastrrError):
    """Exact covariance inversion requested on a singular matrix."""

    code = "singular_covariance"


class EnumerationTooLargeError(FastrrError):
    """Exact enumeration would exceed the configured candidate cap."""

    code = "enumeration_too_large"


class StorageCapError(FastrrError):
    """Materializing explicit assignments would exceed the memory cap."""

    code = "storage_cap_exceeded"


class PoolFormatError(FastrrError):
    """A pool file is malformed or has an unknown layout."""

    code = "pool_format"


class SchemaMismatchError(FastrrError):
    """Inputs disagree with the pool's design (e.g. differing n)."""

    code = "schema_mismatch"


class InputFormatError(FastrrError):
    """A delimited input file failed to parse."""

    code = "input_format"


class EmptyPoolError(FastrrError):
    """An operation requires a nonempty accepted pool."""

    code = "empty_pool"


class UnsupportedStatisticError(FastrrError):
    """The requested statistic is not supported by this operation."""

    code = "unsupported_statistic"


class EmptyIntervalError(FastrrError):
    """Test inversion found no effect size accepted at the given level."""

    code = "empty_interval"

    def __init__(self, message, max_p=None):
        super().__init__(message)
        self.max_p = max_p


class ConsistencyError(FastrrError):
    """Internal cross-check failed (e.g. benchmark paths disagree)."""

    code = "internal_consistency"
