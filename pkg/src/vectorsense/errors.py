"""Exception hierarchy shared by all modules."""


class VectorSenseError(Exception):
    """Base class for every error raised by this package."""


class ConfigurationError(VectorSenseError, ValueError):
    """Inconsistent geometry, grid or scenario parameters."""


class DomainError(VectorSenseError, ValueError):
    """Input outside the mathematical domain of an operation (e.g. zero power)."""


class RangeError(VectorSenseError, IndexError):
    """Time or index outside the span covered by the data."""


class ParseError(VectorSenseError, ValueError):
    """Malformed input file. ``line`` is 1-based when known."""

    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}" if where else f"line {line}"
        super().__init__(f"{where}: {message}" if where else message)


class IntegrityError(ParseError):
    """Stored checksum does not match the payload."""


class DegenerateError(VectorSenseError, ValueError):
    """The measurement does not determine the requested quantity."""


class DetectionError(VectorSenseError, ValueError):
    """An expected feature (e.g. a transit) was not found in a trace."""
