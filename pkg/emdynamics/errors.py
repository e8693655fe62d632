"""Exceptions raised by emdynamics.

Input problems derive from :class:`ValueError`, numerical failures from
:class:`ArithmeticError`; the command line maps the two families to exit
codes 2 and 3.
"""


class InvalidParameterError(ValueError):
    """A model spec, parameter point or solver config violates its invariants."""


class DatasetError(ValueError):
    """Observed data is malformed or incompatible with the model spec."""


class NumericalError(ArithmeticError):
    """A likelihood, iterate or derivative probe became non-finite."""


class InsufficientDataError(NumericalError):
    """Too few usable ratios to estimate a convergence rate."""


class NotLocalMaxError(NumericalError):
    """A sampled point beats the reference likelihood (``not-local-max-in-ball``)."""


class InvalidStateError(NumericalError):
    """An iterated map produced an invalid or divergent state.

    Parameters
    ----------
    index : int
        Position of the offending state in the iterate sequence.
    message : str
        Human readable description.
    """

    def __init__(self, index: int, message: str) -> None:
        super().__init__(f"state {index}: {message}")
        self.index = index
