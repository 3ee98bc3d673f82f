"""Exception hierarchy shared by every module in the package."""


class HybridSSMError(Exception):
    """Base class for all package errors."""


class DimensionError(HybridSSMError, ValueError):
    """Operand shapes do not agree."""


class ContractError(HybridSSMError, ValueError):
    """A documented precondition was violated by the caller."""


class ConfigError(HybridSSMError, ValueError):
    """Invalid configuration. ``field`` names the offending entry."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class CapacityError(HybridSSMError, RuntimeError):
    """A cache would grow past its configured capacity."""


class InputError(HybridSSMError, ValueError):
    """Bad user-supplied data (token ids out of range, spec too small, ...)."""


class PolicyError(HybridSSMError, ValueError):
    """A parameter role is not covered by a precision policy."""


class InvariantViolation(HybridSSMError, RuntimeError):
    """An internal invariant was broken (e.g. frozen weights were mutated)."""


class NonFiniteLossError(HybridSSMError, FloatingPointError):
    """Training produced a NaN or Inf loss."""


class ResumeError(HybridSSMError, RuntimeError):
    """A checkpoint cannot be resumed under the current configuration."""
