"""Exception types raised across the package."""


class EnrichrecError(Exception):
    """Base class for all package errors."""


class ConfigurationError(EnrichrecError, ValueError):
    """Invalid parameters: dimension mismatch, non-positive sigma, bad sizes."""


class InvalidRoundError(EnrichrecError):
    """A consumption round with nothing to choose from."""


class ContractViolation(EnrichrecError):
    """A caller broke a documented precondition (e.g. recommending consumed items)."""


class InputError(EnrichrecError, ValueError):
    """Malformed or insufficient input data."""


class TrainingError(EnrichrecError, RuntimeError):
    """Estimation diverged or otherwise failed."""


class SizeError(EnrichrecError, ValueError):
    """Instance too large for exhaustive enumeration."""


class ProtocolError(EnrichrecError):
    """Experiment protocol violated (e.g. metrics on an empty log)."""
