"""Shared exception taxonomy.

The CLI maps these onto exit codes: validation failures exit 2, numerical
failures exit 3, I/O failures exit 4.
"""


class ToolkitError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 1


class ValidationError(ToolkitError):
    """Bad inputs: malformed files, shape mismatches, unresolvable keys."""

    exit_code = 2


class NumericalError(ToolkitError):
    """Numerical failures: non-finite data, SVD non-convergence."""

    exit_code = 3


class WriteError(ToolkitError):
    """Output-path failures."""

    exit_code = 4
