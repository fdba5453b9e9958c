"""Exception types shared across the package."""


class DialabError(Exception):
    pass


class DimensionError(DialabError, ValueError):
    pass


class DomainError(DialabError, ValueError):
    pass


class BatchTooSmallError(DialabError, ValueError):
    pass


class ConfigError(DialabError, ValueError):
    """Invalid configuration. ``key`` names the offending setting when known."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class CheckpointParseError(DialabError, ValueError):
    def __init__(self, message, layer_index=None):
        super().__init__(message)
        self.layer_index = layer_index


class NumericError(DialabError, ArithmeticError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class TrainingError(NumericError):
    pass
