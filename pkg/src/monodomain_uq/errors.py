"""Exception hierarchy."""


class MonodomainUQError(Exception):
    """Base class for all package errors."""


class ConfigurationError(MonodomainUQError, ValueError):
    """Invalid hierarchy, config file or estimator setup."""


class ArgumentError(MonodomainUQError, ValueError):
    """Shape mismatch or out-of-domain argument."""


class GeometryError(MonodomainUQError, RuntimeError):
    """Point location failed."""


class NumericalError(MonodomainUQError, ArithmeticError):
    """Indefinite input to a factorization or similar breakdown."""


class DegenerateFiberError(NumericalError):
    """Fiber vector too short to define a direction."""


class EllipticityError(MonodomainUQError, ValueError):
    """Sampled conductivity left the admissible eigenvalue band."""


class AssemblyError(MonodomainUQError, ValueError):
    """Non-SPD coefficient passed to the stiffness assembly."""


class FactorizationError(NumericalError):
    """Sparse LU of a diagonal block failed."""


class NonConvergenceError(MonodomainUQError, RuntimeError):
    """GMRES hit its iteration limit.

    The best iterate and its residual norm are kept on the exception.
    """

    def __init__(self, message, best=None, residual=None):
        super().__init__(message)
        self.best = best
        self.residual = residual


class NewtonDivergenceError(MonodomainUQError, RuntimeError):
    def __init__(self, message, history=()):
        super().__init__(message)
        self.history = list(history)


class SampleError(MonodomainUQError, RuntimeError):
    """A sampler evaluation failed; the cause is chained."""

    def __init__(self, message, level=None, index=None):
        super().__init__(message)
        self.level = level
        self.index = index
