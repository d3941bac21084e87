"""Exception hierarchy shared by all tcr modules."""


class TCRError(Exception):
    """Base class for every error raised by this package."""


class InvalidConfiguration(TCRError, ValueError):
    pass


class InvalidInput(TCRError, ValueError):
    pass


class ModelDegenerate(TCRError):
    """(I - A) is singular or numerically so."""


class SimulationDiverged(TCRError):
    pass


class SimulationDegenerate(TCRError):
    pass


class DegenerateReference(TCRError):
    """Reference covariance of a KL divergence is not invertible."""


class DegeneratePushforward(TCRError):
    """Pushforward covariance of the causes cannot be factorized."""


class NumericallyInconsistentStats(TCRError):
    """Conditional variance of Y given Z came out clearly negative."""


class DegenerateParameters(TCRError):
    """A reduction map row (or its alpha-weighted version) has zero norm."""


class InsufficientData(TCRError):
    pass


class DivergedParameters(TCRError):
    pass


class TrainingFailed(TCRError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or []


class AbstractionViolated(TCRError):
    pass
