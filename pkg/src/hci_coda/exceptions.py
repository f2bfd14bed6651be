"""Shared exception root for hci-coda.

Concrete error types live next to the code that raises them; they all
derive from :class:`CodaError` so the command line can map any package
failure to a runtime exit code.
"""


class CodaError(Exception):
    """Base class for every error raised by hci-coda."""


class IOFailure(CodaError, OSError):
    """Raised when a file cannot be written or a required input file is missing."""
