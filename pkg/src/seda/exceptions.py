"""Exception types raised across the package."""


class InvalidArgumentError(ValueError):
    """An argument violates an operation's preconditions."""


class NumericFailureError(ArithmeticError):
    """A computation produced non-finite values.

    ``step`` carries the diffusion step (or training iteration) at which the
    failure was detected, when one applies.
    """

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class FormatError(ValueError):
    """A file does not follow the expected binary layout."""


class DatasetValidationError(ValueError):
    """A parsed dataset violates an invariant.

    ``index`` names the offending record.
    """

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class ConfigError(ValueError):
    """A run configuration is malformed; ``key`` names the offending entry."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key
