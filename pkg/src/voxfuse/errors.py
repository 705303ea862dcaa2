"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: usage problems exit 1, broken
or inconsistent input data exit 2, numerical-domain violations exit 3.
"""


class VoxfuseError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 3


class UsageError(VoxfuseError):
    """Bad command line or API invocation."""

    exit_code = 1


class DataError(VoxfuseError):
    """Missing, unparsable, or mutually inconsistent input data."""

    exit_code = 2


class DomainError(VoxfuseError, ValueError):
    """Numerical-domain violation: out-of-range argument, empty domain,
    size mismatch between maps, or a structural grid invariant breach."""

    exit_code = 3
