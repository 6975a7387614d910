"""Exception types shared across the package."""


class MVSGDError(Exception):
    """Base class for all errors raised by mvsgd."""


class InvalidArgument(MVSGDError, ValueError):
    pass


class ProtocolViolation(MVSGDError):
    """A participant broke the round protocol (mask mismatch, negative vote count...)."""


class CorruptStream(MVSGDError):
    """A bit stream could not be decoded."""


class DegenerateInput(MVSGDError, ValueError):
    """Input has no information to encode (e.g. an all-zero vector for the quantizer)."""


class ConfigError(MVSGDError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field
