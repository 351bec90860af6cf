"""Exception hierarchy shared by all modules."""


class OutletFlowError(Exception):
    """Base class for library errors."""


class InvalidGeometry(OutletFlowError):
    pass


class DomainTooSmall(OutletFlowError):
    pass


class UnknownOutlet(OutletFlowError):
    pass


class MeshTooCoarse(OutletFlowError):
    pass


class SectionNotAligned(OutletFlowError):
    pass


class FluxImbalance(OutletFlowError):
    pass


class CutoffTooWide(OutletFlowError):
    pass


class SingularPoint(OutletFlowError):
    pass


class DegeneratePunctures(OutletFlowError):
    pass


class InvalidProbe(OutletFlowError):
    pass


class UnsupportedExponent(OutletFlowError):
    pass


class NumericalBlowup(OutletFlowError):
    pass


class LinearSolveFailure(OutletFlowError):
    pass


class NonlinearDivergence(OutletFlowError):
    """Raised when the nonlinear iteration fails; carries the residual history."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history or [])


class ConfigError(OutletFlowError):
    pass
