"""Exception hierarchy for qsdlab."""


class QsdlabError(Exception):
    """Base class for all library errors."""


class InvalidDimension(QsdlabError, ValueError):
    pass


class CapExceeded(QsdlabError, ValueError):
    pass


class NotOnGrid(QsdlabError, ValueError):
    pass


class DegenerateAspiration(QsdlabError, ValueError):
    pass


class ProtocolViolation(QsdlabError, ValueError):
    """A protocol produced rates breaking the imitation conditions."""

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


class UnsupportedProtocol(QsdlabError):
    """Protocol not allowed for the requested computation without override."""


class AllCensored(QsdlabError, RuntimeError):
    pass


class NotIrreducible(QsdlabError, ValueError):
    pass


class NotSubstochastic(QsdlabError, ValueError):
    pass


class NoConvergence(QsdlabError, RuntimeError):
    """Iterative method stopped without meeting its tolerance."""

    def __init__(self, message, last=None, residual=None):
        super().__init__(message)
        self.last = last
        self.residual = residual


class TooLarge(QsdlabError, ValueError):
    pass


class TotalAbsorption(QsdlabError, ValueError):
    pass


class NonPositiveGap(QsdlabError, ValueError):
    pass


class StepUnderflow(QsdlabError, RuntimeError):
    pass


class ConfigError(QsdlabError):
    """Aggregated configuration problems; ``errors`` is a list of strings."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))
