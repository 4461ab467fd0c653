"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid parameters, geometry, or experiment configuration."""


class RecurrentWalkError(ConfigurationError):
    """Raised when a Green's-function quantity is requested in a dimension
    where the simple random walk is recurrent (d <= 2) and the quantity
    diverges.  This is a semantic signal, not a numerical failure."""


class QuadratureError(RuntimeError):
    """Time-quadrature failed to meet its tolerance.

    Carries the worst offending site and time so the caller can inspect
    where the integrand was under-resolved.
    """

    def __init__(self, message, site=None, time=None, residual=None):
        super().__init__(message)
        self.site = site
        self.time = time
        self.residual = residual


class NumericalBlowupError(RuntimeError):
    """A simulated field left the representable range (NaN/Inf).

    Carries the step index, site, and (for ensemble runs) the replica at
    which the first non-finite value appeared.
    """

    def __init__(self, message, step=None, site=None, replica=None):
        super().__init__(message)
        self.step = step
        self.site = site
        self.replica = replica
