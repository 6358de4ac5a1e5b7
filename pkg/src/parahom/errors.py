"""Exception types raised across the package."""


class ParahomError(Exception):
    """Base class for all package errors."""


class EllipticityViolation(ParahomError):
    pass


class OutOfDomain(ParahomError):
    pass


class InvalidExponent(ParahomError):
    pass


class GridMismatch(ParahomError):
    pass


class IncompatibleRHS(ParahomError):
    pass


class MeanNotZero(ParahomError):
    pass


class UnderResolved(ParahomError):
    pass


class EpsilonTooLarge(ParahomError):
    pass


class DegenerateFit(ParahomError):
    pass


class ConfigError(ParahomError):
    pass


class SolverDiverged(ParahomError):
    """Iterative solve hit its iteration cap.

    ``residual`` carries the best relative residual reached.
    """

    def __init__(self, message, residual=float("nan")):
        super().__init__(message)
        self.residual = residual


class StepSolverDiverged(SolverDiverged):
    pass
