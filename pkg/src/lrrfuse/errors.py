"""Exception hierarchy shared by every module."""


class LrrError(Exception):
    """Base class for all library errors."""


class ShapeError(LrrError, ValueError):
    pass


class ContractError(LrrError, ValueError):
    """A caller broke a documented precondition."""


class DivergenceError(LrrError, ArithmeticError):
    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class FormatError(LrrError):
    """Malformed or unreadable file."""


class BadMagicError(FormatError):
    pass


class ManifestError(FormatError):
    pass


class TruncatedPayloadError(FormatError):
    pass


class PairingError(LrrError):
    def __init__(self, message, offenders=()):
        super().__init__(message)
        self.offenders = list(offenders)


class SizeError(ShapeError):
    pass


class GradientError(LrrError, ArithmeticError):
    """Non-finite gradient reached the optimizer."""

    def __init__(self, message, name=None):
        super().__init__(message)
        self.name = name
