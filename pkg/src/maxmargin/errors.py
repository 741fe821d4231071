class MaxMarginError(Exception):
    """Base class for library errors."""


class ParameterError(MaxMarginError, ValueError):
    pass


class ConstructionError(MaxMarginError, RuntimeError):
    """A randomized construction ran out of retries.

    ``worst`` carries the most violating (row, document, value) seen.
    """

    def __init__(self, message, worst=None):
        super().__init__(message)
        self.worst = worst


class CapExceeded(ParameterError):
    pass


class FormatError(MaxMarginError, ValueError):
    pass
