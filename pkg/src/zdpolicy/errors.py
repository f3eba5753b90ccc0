"""Exception types raised across the package."""


class ZdpError(Exception):
    """Base class for all package errors."""


class ValidationError(ZdpError, ValueError):
    """Bad user input: parameters, configuration, shapes."""


class NumericalError(ZdpError, ArithmeticError):
    """A numerical routine could not produce a trustworthy result."""


class NonFinite(NumericalError):
    pass


class SingularDecoupling(NumericalError):
    """The decoupling term L_g L_f^(gamma-1) y vanished."""


class NoConvergence(NumericalError):
    pass


class Uncontrollable(NumericalError):
    pass


class BadPoles(ValidationError):
    pass


class NoStabilizingSolution(NumericalError):
    pass


class DegenerateProjection(NumericalError):
    """No choice of eigenvectors has an invertible z-projection."""


class RelativeDegreeLoss(NumericalError):
    pass


class Diverged(NumericalError):
    """An iLQR rollout left the working box or produced non-finite cost."""


class Escaped(NumericalError):
    pass


class AllBelowFloor(NumericalError):
    pass


class TrainingDiverged(NumericalError):
    pass


class AssumptionViolated(NumericalError):
    """omega depends on eta_i for some i >= 3."""
