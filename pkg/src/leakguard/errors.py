"""Exception types raised across the package."""


class LeakGuardError(Exception):
    pass


class ShapeError(LeakGuardError, ValueError):
    pass


class DomainError(LeakGuardError, ValueError):
    pass


class HorizonError(DomainError):
    """Timestep outside the calibrated horizon."""


class TrainingError(LeakGuardError, RuntimeError):
    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class ParseError(LeakGuardError, ValueError):
    def __init__(self, message, row=None, col=None):
        super().__init__(message)
        self.row = row
        self.col = col


class FormatError(LeakGuardError, ValueError):
    def __init__(self, message, section=None):
        super().__init__(message)
        self.section = section


class TamperError(LeakGuardError):
    """Authenticated decryption failed: wrong key or modified ciphertext."""
