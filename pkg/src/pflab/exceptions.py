"""Exception hierarchy shared by every pflab module."""


class PFLabError(Exception):
    """Base class for all pflab errors."""


class MalformedCase(PFLabError, ValueError):
    pass


class DisconnectedGraph(PFLabError, ValueError):
    pass


class NoSlackBus(PFLabError, ValueError):
    pass


class DuplicateSlack(PFLabError, ValueError):
    pass


class ZeroImpedanceBranch(PFLabError, ValueError):
    pass


class NumericalFailure(PFLabError):
    """Raised when a numerical procedure cannot produce a result."""


class SingularJacobian(NumericalFailure):
    pass


class SingularBprime(NumericalFailure):
    pass


class TooManyDivergent(NumericalFailure):
    pass


class NonFiniteLoss(NumericalFailure):
    pass


class ShapeMismatch(PFLabError, ValueError):
    pass


class NotScalar(PFLabError, ValueError):
    pass


class DegenerateTargets(PFLabError, ValueError):
    pass


class NearCancellation(PFLabError, ValueError):
    pass


class EmptyAfterExclusion(PFLabError, ValueError):
    pass
