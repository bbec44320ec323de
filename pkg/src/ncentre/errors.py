"""Exception hierarchy shared by all ncentre modules."""


class NCentreError(Exception):
    """Base class for all errors raised by this package."""


class InvalidConfigurationError(NCentreError):
    """Problem instance violates a structural invariant (duplicate centres, zero charge, ...)."""


class SingularityError(NCentreError):
    """Evaluation requested at (or too close to) a Coulomb singularity."""

    def __init__(self, message, centre_index=None):
        super().__init__(message)
        self.centre_index = centre_index


class DomainError(NCentreError):
    """Arguments outside the mathematical domain of an operation."""


class ConstraintError(NCentreError):
    """A conserved constraint (quadric, energy) drifted beyond tolerance."""


class IntegrationFailureError(NCentreError):
    """The ODE integrator failed (step underflow, no exit within budget, ...)."""


class ConvergenceError(NCentreError):
    """An iterative solver did not converge; carries the final residual."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class NotAScatteringStateError(NCentreError):
    """Trajectory did not escape on the requested side."""


class NumericalError(NCentreError):
    """Generic numerical failure (eigensolver stagnation, ...)."""


class BranchAmbiguityError(DomainError):
    """Point on the focal segment: prolate coordinates have no unique branch."""

    def __init__(self, message, nearest_branch=None):
        super().__init__(message)
        self.nearest_branch = nearest_branch
