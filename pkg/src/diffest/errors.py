"""Exception hierarchy shared by all diffest modules."""


class DiffestError(Exception):
    """Base class for all diffest errors."""


class DomainError(DiffestError, ValueError):
    """A state or parameter value lies outside its open interval."""


class NonFiniteResult(DiffestError, ArithmeticError):
    """A computation produced nan or inf."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class OrderTooHigh(DiffestError, ValueError):
    pass


class EmptyPath(DiffestError, ValueError):
    pass


class EmptyInput(DiffestError, ValueError):
    pass


class UnknownModel(DiffestError, KeyError):
    pass


class UnknownEstFun(DiffestError, KeyError):
    pass


class ModelMismatch(DiffestError, ValueError):
    """The estimating function needs a coefficient shape the model lacks."""


class MissingDerivative(DiffestError, ValueError):
    pass


class StateEscape(DiffestError):
    """A simulated path left the state space."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class IndivisibleGrid(DiffestError, ValueError):
    pass


class DegenerateNormalizer(DiffestError, ArithmeticError):
    pass


class ZeroDenominator(DiffestError, ArithmeticError):
    pass


class AllCensored(DiffestError):
    """Every Monte Carlo defect estimate is indistinguishable from zero.

    This is the expected outcome for an exact martingale estimating function.
    """

    def __init__(self, message, points=None):
        super().__init__(message)
        self.points = points or []


class ConfigError(DiffestError, ValueError):
    pass
