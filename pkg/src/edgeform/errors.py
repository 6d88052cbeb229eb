"""Exception hierarchy shared by all solver stages."""


class EdgeformError(Exception):
    """Base class. ``stage`` is filled in when an error crosses a pipeline stage."""

    stage = None

    def tagged(self, stage):
        if self.stage is None:
            self.stage = stage
        return self

    def __str__(self):
        msg = super().__str__()
        return f"[{self.stage}] {msg}" if self.stage else msg


class DomainError(EdgeformError, ValueError):
    pass


class UnsupportedError(EdgeformError, ValueError):
    pass


class ExtrapolationError(EdgeformError, ValueError):
    pass


class GateError(EdgeformError):
    """A hypothesis of an existence theorem failed; ``condition`` names it."""

    condition = "gate"


class GateFailed(GateError):
    def __init__(self, message, report=None, condition="eigenvalue"):
        super().__init__(message)
        self.report = report
        self.condition = condition


class NotVanishing(GateError):
    condition = "vanishing"


class IncompatibleData(GateError):
    condition = "(first)"


class NotNormalized(GateError):
    condition = "normalized"


class HorizontallyDegenerate(GateError):
    condition = "horizontal"


class NotExact(GateError):
    condition = "exact"

    def __init__(self, message, witness=None):
        super().__init__(message)
        self.witness = witness


class NotGRelated(GateError):
    condition = "g-related"


class NonContraction(EdgeformError, ArithmeticError):
    pass


class StiffnessError(EdgeformError, ArithmeticError):
    def __init__(self, message, t=None):
        super().__init__(message)
        self.t = t


class InternalConsistency(EdgeformError, AssertionError):
    pass


class ConsistencyError(EdgeformError, AssertionError):
    pass


class FoldError(EdgeformError, ArithmeticError):
    pass


class NearSingular(EdgeformError, ArithmeticError):
    pass


class NoRealRoot(EdgeformError, ArithmeticError):
    pass


class AmbiguousRoot(EdgeformError, ArithmeticError):
    pass


class BoxExit(EdgeformError, ArithmeticError):
    pass


class ConfigError(EdgeformError, ValueError):
    pass
