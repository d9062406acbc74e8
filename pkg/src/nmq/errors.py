"""Exception hierarchy shared by every module."""


class NMQError(Exception):
    """Base class for library errors."""


class InvalidShape(NMQError, ValueError):
    pass


class InvalidValue(NMQError, ValueError):
    pass


class InvalidState(NMQError, RuntimeError):
    pass


class InvalidConfig(NMQError, ValueError):
    pass


class Unsupported(NMQError, NotImplementedError):
    pass


class FormatError(NMQError, ValueError):
    """Malformed checkpoint or packed payload."""


class IoError(NMQError, OSError):
    pass


class DivergenceError(NMQError, RuntimeError):
    """Training produced a non-finite loss.

    ``state`` holds the last parameters that produced a finite loss.
    """

    def __init__(self, message, state=None, log=None):
        super().__init__(message)
        self.state = state
        self.log = log or []
