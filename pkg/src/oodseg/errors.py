"""Exception taxonomy shared across the package.

The CLI maps these onto process exit codes, so the distinctions matter:
validation problems (bad arguments, malformed or non-finite payloads) are
recoverable caller mistakes, I/O problems come from the filesystem, and
state errors mean the pipeline was driven out of order.
"""


class OodsegError(Exception):
    """Base class for all package-specific errors."""


class ArgumentError(OodsegError, ValueError):
    """A caller-supplied value violates a documented precondition."""


class FormatError(OodsegError):
    """A file does not follow its declared binary format."""


class TruncationError(FormatError):
    """A file header promises more payload bytes than are present."""


class DataError(OodsegError):
    """Payload decoded fine but contains invalid values (NaN, inf)."""


class StateError(OodsegError):
    """An operation was invoked with stale or missing pipeline state."""


class UndefinedMetricError(OodsegError, ValueError):
    """A metric is mathematically undefined for the given inputs."""
