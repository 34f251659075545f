class ScanMatchError(Exception):
    """Base class for algorithmic failures (CLI exit code 1)."""


class UnderConstrainedError(ScanMatchError):
    pass


class SingularSystemError(ScanMatchError):
    pass


class DivergenceError(ScanMatchError):
    pass


class StreamOrderError(ScanMatchError):
    pass


class CloudFormatError(ValueError):
    """Raised while parsing a point-cloud file; carries the offending line."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class EmptyCloudError(ValueError):
    pass


class ConfigError(ValueError):
    pass
