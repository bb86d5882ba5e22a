"""Exception hierarchy shared by every besent module."""


class BESentError(Exception):
    """Base class for all package errors."""


class DataError(BESentError, ValueError):
    """Input data violates a documented invariant."""


class FormatError(DataError):
    """A file does not parse in its declared format."""

    def __init__(self, message, line=None, field=None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        if where:
            message = f"{', '.join(where)}: {message}"
        super().__init__(message)


class ConfigurationError(BESentError):
    """Missing or invalid configuration (API keys, unreadable stopword files, ...)."""


class TransportError(BESentError):
    """HTTP failure while talking to a remote service."""

    def __init__(self, message, status=None):
        self.status = status
        super().__init__(f"{message} (status={status})" if status is not None else message)


class TrainingError(BESentError):
    """Numerical failure during model fitting."""


class BESentWarning(UserWarning):
    """Recoverable data problems (tiny strata, absent classes)."""
