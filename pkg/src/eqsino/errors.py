class UsageError(ValueError):
    """Invalid arguments or configuration (CLI exit code 1)."""


class FormatError(ValueError):
    """Malformed file on disk (CLI exit code 1)."""


class NumericalError(RuntimeError):
    """NaN/Inf encountered or an audit failed (CLI exit code 2)."""
