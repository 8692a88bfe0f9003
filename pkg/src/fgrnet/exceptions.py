class FGRNetError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(FGRNetError, ValueError):
    """A tensor shape does not satisfy an operation's contract.

    ``axis`` names the offending dimension (e.g. ``"channel"``) when known.
    """

    def __init__(self, message, axis=None):
        if axis is not None:
            message = f"{message} (axis: {axis})"
        super().__init__(message)
        self.axis = axis


class ContractError(FGRNetError, ValueError):
    pass


class ConfigError(FGRNetError, ValueError):
    pass


class DivergenceError(FGRNetError, FloatingPointError):
    pass
