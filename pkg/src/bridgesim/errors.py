"""Exception hierarchy shared by every bridgesim module."""


class BridgeSimError(Exception):
    """Base class for all library errors."""


class InvalidArgument(BridgeSimError, ValueError):
    """A precondition on an argument was violated."""


class EvaluationError(BridgeSimError, ArithmeticError):
    """A coefficient or expression could not be evaluated (domain error, NaN)."""


class NumericError(BridgeSimError, ArithmeticError):
    """A numerical factorisation or solve failed (singular sigma, Cholesky)."""


class ControllabilityError(NumericError):
    """The Gramian M(t) is singular, so the linear bridge SDE is ill-posed."""


class BlowupError(NumericError):
    """An integrated state became non-finite or exceeded the blow-up bound."""

    def __init__(self, message, time=None):
        super().__init__(message)
        self.time = time


class EstimationError(BridgeSimError):
    """Not enough usable (finite-weight) samples to form an estimate."""


class OracleInsufficient(BridgeSimError):
    """The rejection oracle accepted too few paths to be trusted."""


class ConfigError(BridgeSimError, ValueError):
    """A run configuration is malformed or inconsistent."""


class ParseError(ConfigError):
    """Syntax error in a coefficient expression.

    Attributes
    ----------
    position : int
        Zero-based character offset of the offending token.
    expected : tuple of str
        Token kinds that would have been accepted at ``position``.
    """

    def __init__(self, message, position=0, expected=()):
        self.position = position
        self.expected = tuple(expected)
        detail = f"{message} at position {position}"
        if self.expected:
            detail += f" (expected one of: {', '.join(self.expected)})"
        super().__init__(detail)
