class ConfigError(ValueError):
    """Invalid configuration, dataset spec or CLI input (exit code 2)."""


class ShapeError(ValueError):
    pass


class LabelRangeError(ValueError):
    pass


class NumericalError(FloatingPointError):
    """A loss or gradient became non-finite (exit code 3).

    ``details`` carries the offending loss terms so callers can dump them.
    """

    def __init__(self, message, details=None):
        super().__init__(message)
        self.details = dict(details or {})
