"""Exception hierarchy shared by all supplybp modules."""


class SupplyBPError(Exception):
    """Base class for library errors."""


class ParseError(SupplyBPError):
    """A network or measurement file could not be parsed."""


class ValidationError(SupplyBPError):
    """A parsed object violates a structural invariant."""


class NonPositiveVariance(SupplyBPError, ArithmeticError):
    """A Gaussian operation produced a non-positive (or non-finite) variance."""


class SingularMatrix(SupplyBPError, ArithmeticError):
    """A 2x2 inversion was requested for a (numerically) singular matrix."""


class KeyMismatch(SupplyBPError, KeyError):
    """Two per-link collections do not cover the same links."""


class MissingTruth(SupplyBPError):
    """Ground-truth vertex values are missing for measurement synthesis."""


class NoAnchor(SupplyBPError):
    """A gas computation needs at least one vertex with known pressure."""


class SingularSystem(SupplyBPError, ArithmeticError):
    """The dense information matrix is singular."""


class NoConvergence(SupplyBPError):
    """An iterative dense solver failed to reach its tolerance."""


class InnerDiverged(SupplyBPError):
    """Belief propagation diverged inside a Gauss-Newton step."""

    def __init__(self, step, trace=None):
        super().__init__(f"inner BP diverged at Gauss-Newton step {step}")
        self.step = step
        self.trace = trace
