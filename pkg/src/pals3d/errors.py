"""Exception types shared across the package."""


class PalsError(Exception):
    """Base class for all pals3d errors."""


class ConfigError(PalsError):
    """Invalid configuration, option value, or file schema."""


class DomainError(PalsError):
    """Argument outside the mathematical domain of an operation."""


class SingularBasisError(PalsError):
    """Ellipsoid shape matrix with non-positive determinant entered a forward evaluation."""


class BarrierViolation(PalsError):
    """A trial step left the positive-definite domain of the log-det barrier."""


class UnsupportedKindError(PalsError):
    """Operation not defined for this basis parameterization."""


class ContractError(PalsError):
    """Caller violated an operation's preconditions (e.g. mismatched lengths)."""


class OptimizationError(PalsError):
    """Numerical failure inside the solver (singular normal matrix, etc.)."""
