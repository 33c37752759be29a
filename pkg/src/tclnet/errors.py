"""Exception hierarchy shared across the package."""


class TclNetError(Exception):
    pass


class InvalidParameterError(TclNetError, ValueError):
    pass


class FormatError(TclNetError):
    pass


class ContractViolationError(TclNetError):
    pass


class DecodeError(TclNetError):
    def __init__(self, message: str, position: int | None = None):
        if position is not None:
            message = f"{message} (at symbol position {position})"
        super().__init__(message)
        self.position = position


class IncompatibleModelError(TclNetError):
    pass


class ProviderUnavailableError(TclNetError):
    pass


class ProtocolError(TclNetError):
    pass
