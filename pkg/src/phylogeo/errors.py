class PhylogeoError(Exception):
    """Base class for all errors raised by this package."""


class ParseError(PhylogeoError, ValueError):
    """Malformed input file. Carries the offending line number when known."""

    def __init__(self, message, line=None, source=None):
        self.line = line
        self.source = source
        where = ""
        if source is not None:
            where += f"{source}"
        if line is not None:
            where += f"{':' if where else 'line '}{line}"
        super().__init__(f"{where}: {message}" if where else message)


class DegenerateDataError(PhylogeoError, ValueError):
    """The data carry no information to infer anything from."""


class SaturationError(PhylogeoError, RuntimeError):
    """Network construction would need too many inferred intermediates."""


class EnumerationUnavailable(PhylogeoError):
    """An exact enumeration was requested beyond its configured cap."""


class ConfigError(PhylogeoError, ValueError):
    pass
