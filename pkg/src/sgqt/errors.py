"""Exception types raised across the package."""


class SGQTError(Exception):
    pass


class InvalidDimensionError(SGQTError, ValueError):
    pass


class DimensionMismatchError(SGQTError, ValueError):
    pass


class DegenerateVectorError(SGQTError, ArithmeticError):
    """Raised when a vector is too close to zero to be normalized."""


class ZeroCountsError(SGQTError, ArithmeticError):
    """Both perturbed settings returned zero counts; the gradient ratio is undefined."""


class InvalidStateError(SGQTError, ValueError):
    pass


class UnsupportedDimensionError(SGQTError, ValueError):
    pass


class ResolutionError(SGQTError, ValueError):
    """The sampling grid cannot represent a mode to the required accuracy."""


class ConfigError(SGQTError, ValueError):
    def __init__(self, message, field=None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class OracleError(SGQTError, RuntimeError):
    pass


class TrialFailure(SGQTError, RuntimeError):
    """A trial of an ensemble raised; carries what is needed to replay it."""

    def __init__(self, trial, master_seed, reason):
        self.trial = trial
        self.master_seed = master_seed
        self.reason = reason
        super().__init__(trial, master_seed, reason)

    def __str__(self):
        return f"trial {self.trial} (master_seed={self.master_seed}) failed: {self.reason}"
