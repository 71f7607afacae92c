"""Exception hierarchy shared across the toolkit."""


class HamflowError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(HamflowError):
    """Malformed experiment configuration (bad field, missing file)."""


class UnknownExample(HamflowError):
    """Requested example system name is not shipped."""


class NonPSDHessian(HamflowError):
    """The state penalty has an indefinite Hessian at the origin."""


class BadPartition(HamflowError):
    """Cutoff state split inconsistent with the state dimension."""


class InsufficientSamples(HamflowError):
    """Growth fit needs at least two shells with enough samples each."""


class SingularG(HamflowError):
    """Input-channel matrix not invertible at a queried point."""


class NotStabilizable(HamflowError):
    """(A, B) fails the PBH stabilizability test."""


class NotDetectable(HamflowError):
    """(C, A) fails the PBH detectability test."""


class NotHurwitz(HamflowError):
    """Matrix has an eigenvalue with nonnegative real part."""


class IllConditionedSubspace(HamflowError):
    """Stable-subspace basis too ill conditioned to extract a Riccati solution."""


class SolverInvariantViolation(HamflowError):
    """A solver postcondition (residual, sign, symmetry) failed a posteriori."""


class IntegrationError(HamflowError):
    """Base class for ODE integration failures."""


class StepSizeUnderflow(IntegrationError):
    """Adaptive step collapsed: blow-up or finite escape along the trajectory."""


class IntegratorEscape(StepSizeUnderflow):
    """State norm exceeded the escape guard during integration."""


class NonFiniteState(IntegrationError):
    """NaN or infinity produced while evaluating the vector field."""


class NoConvergence(HamflowError):
    """Fixed-point or Newton iteration failed to reach its tolerance."""


class Uncovered(HamflowError):
    """Query state is outside the projected manifold chart."""


class ShootingDiverged(HamflowError):
    """Boundary-value Newton iteration failed; carries the best iterate."""

    def __init__(self, message, best_residual=None, best_iterate=None):
        super().__init__(message)
        self.best_residual = best_residual
        self.best_iterate = best_iterate
