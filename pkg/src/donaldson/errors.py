class NumericalError(ArithmeticError):
    """A numerical routine failed (overflow, breakdown, non-convergence)."""


class ConvergenceError(NumericalError):
    """Iteration budget exhausted; ``best`` carries the best iterate seen."""

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class DiscretizationError(NumericalError):
    """The mesh is too coarse to resolve a spectral gap."""

    def __init__(self, message, spectrum=None):
        super().__init__(message)
        self.spectrum = spectrum


class CertificationError(AssertionError):
    pass
