class FailSlowError(Exception):
    """Base class for errors raised by this package."""


class InvalidInputError(FailSlowError, ValueError):
    pass


class InsufficientDataError(FailSlowError, ValueError):
    pass


class TraceFormatError(FailSlowError, ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line
