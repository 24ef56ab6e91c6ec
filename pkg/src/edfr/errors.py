"""Exception and warning types shared across the package."""


class EdfrError(Exception):
    """Base class for all errors raised by this package."""


class DimensionMismatch(EdfrError, ValueError):
    pass


class DisconnectedGraph(EdfrError, ValueError):
    pass


class NonpositiveSusceptance(EdfrError, ValueError):
    pass


class UnbalancedInjection(EdfrError, ValueError):
    pass


class InvalidParameters(EdfrError, ValueError):
    pass


class ParseError(EdfrError, ValueError):
    pass


class UnknownUnitGroup(EdfrError, KeyError):
    pass


class OutOfBounds(EdfrError, ValueError):
    pass


class MissingDuals(EdfrError, ValueError):
    pass


class Infeasible(EdfrError):
    """No point satisfies the constraints.

    ``outcome_id`` names the first scenario outcome found to be infeasible
    when the failing problem is indexed by outcomes.
    """

    def __init__(self, message: str, outcome_id=None):
        super().__init__(message)
        self.outcome_id = outcome_id


class MaxIterations(EdfrError):
    pass


class NumericalBlowup(EdfrError):
    pass


class DegenerateDualsWarning(UserWarning):
    """Active constraint gradients are linearly dependent; multipliers are not unique."""
