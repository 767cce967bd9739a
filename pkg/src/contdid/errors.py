"""Exception hierarchy.

Every error carries a stable ``code`` (the class name) so the command line
can emit machine-readable failures.
"""


class ContDidError(Exception):
    """Base class for all estimation and data errors."""

    @property
    def code(self) -> str:
        return type(self).__name__

    def to_dict(self) -> dict:
        return {"code": self.code, "message": str(self)}


# panel ----------------------------------------------------------------------

class PanelError(ContDidError):
    pass


class UnbalancedPanel(PanelError):
    pass


class ParseError(PanelError):
    pass


class DuplicateObservation(PanelError):
    pass


class InvalidPanel(PanelError):
    pass


# smoothing ------------------------------------------------------------------

class TooFewObservations(ContDidError):
    pass


class DegenerateBandwidth(TooFewObservations):
    pass


class InsufficientSupport(ContDidError):
    """A CEF was queried where the control sample is too thin."""


class NoQuasiStayers(ContDidError):
    pass


class DegenerateFit(RuntimeWarning):
    """Local linear design singular at a query point; locally constant fit used."""


# propensity -----------------------------------------------------------------

class SeparationDetected(ContDidError):
    pass


class ZeroControlProbability(ContDidError):
    pass


class ConvergenceWarning(RuntimeWarning):
    pass


# estimators -----------------------------------------------------------------

class NoStayers(ContDidError):
    pass


class NoMovers(ContDidError):
    pass


class AllMoversTrimmed(ContDidError):
    pass


class NoIncreasers(ContDidError):
    pass


class NoDecreasers(ContDidError):
    pass


class NoEligibleMovers(ContDidError):
    pass


class NoEligibleControls(ContDidError):
    pass


class NoNeverMovers(ContDidError):
    pass


class ZeroDenominator(ContDidError):
    pass


class CollinearTreatment(ContDidError):
    pass


# inference / simulation -----------------------------------------------------

class TooManyFailures(ContDidError):
    pass


class InvalidSpec(ContDidError):
    pass


class UnsupportedTarget(ContDidError):
    pass
