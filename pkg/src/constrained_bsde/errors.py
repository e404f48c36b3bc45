"""Exception hierarchy shared by all modules."""


class ConstrainedBsdeError(Exception):
    """Base class for every error raised by this package."""


class DomainError(ConstrainedBsdeError, ValueError):
    """Argument outside the domain of an operation (e.g. time outside [0, T])."""


class UnsupportedConstraintError(ConstrainedBsdeError):
    """Constraint family cannot be used by the requested operation."""


class InsufficientSearchRadiusError(ConstrainedBsdeError):
    """Face-lift search grid is smaller than the certified sufficient radius."""


class ModelBoundsError(ConstrainedBsdeError):
    """Coefficients violate the declared bound / Lipschitz constant."""


class StepSizeError(ConstrainedBsdeError):
    """Time step too coarse for the Picard contraction or scheme stability."""


class BasisError(ConstrainedBsdeError):
    """Least-squares regression is ill-conditioned."""


class InadmissibleControlError(ConstrainedBsdeError):
    """Control takes values where the support function is infinite."""


class ConfigError(ConstrainedBsdeError, ValueError):
    """Invalid experiment configuration."""
