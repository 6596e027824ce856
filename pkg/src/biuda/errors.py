"""Exception types shared across the package.

Exit-code mapping used by the CLI: ConfigurationError and DataError map to
exit code 2, NumericalError to exit code 3.
"""


class ConfigurationError(ValueError):
    """Invalid configuration value or inconsistent option combination."""


class DataError(ValueError):
    """On-disk dataset is malformed; the message names the offending file."""


class NumericalError(RuntimeError):
    """A loss or update produced a non-finite value; names the term."""


class ReportError(ValueError):
    """Metrics input is incomplete for report generation."""
