"""Exception hierarchy shared across the package."""


class SeqRLError(Exception):
    """Base class for all package errors."""


class InvalidInput(SeqRLError, ValueError):
    pass


class InvalidAction(SeqRLError, ValueError):
    """A mutation action violates the mask or the wild-type exclusion rule."""


class InvalidConfig(SeqRLError, ValueError):
    pass


class ParseError(SeqRLError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DuplicateVariant(ParseError):
    pass


class DivergedError(SeqRLError, RuntimeError):
    """Raised when training produces a non-finite loss.

    ``last_good`` holds the last parameter vector with a finite loss, and
    ``step`` the step at which divergence was detected.
    """

    def __init__(self, message, step=None, last_good=None):
        super().__init__(message)
        self.step = step
        self.last_good = last_good
