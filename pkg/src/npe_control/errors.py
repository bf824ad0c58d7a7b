"""Exception hierarchy shared by all modules."""


class NPEError(Exception):
    """Base class for every error raised by this package."""


class ConfigurationError(NPEError, ValueError):
    """Inconsistent lattice, box, config file or mismatched operands."""


class InvariantError(NPEError):
    """A field or construction violates a structural invariant."""


class DomainError(NPEError, ValueError):
    """Argument outside the domain where an operation is defined."""


class QuadratureFailure(NPEError):
    """Adaptive time quadrature did not reach its tolerance."""


class CertificationFailure(NPEError):
    """A numerical certificate could not be established."""

    def __init__(self, message, t=None):
        super().__init__(message)
        self.t = t


class BlowUpError(NPEError):
    """The closed-form denominator vanished before the requested time."""

    def __init__(self, message, bracket):
        super().__init__(message)
        self.bracket = tuple(bracket)

    @property
    def time(self):
        lo, hi = self.bracket
        return 0.5 * (lo + hi)
