"""Exception types shared across the package."""


class GgcnError(Exception):
    """Base class for all package errors."""


class DimensionError(GgcnError, ValueError):
    """Tensor or array shapes are incompatible."""


class ConfigurationError(GgcnError, ValueError):
    """A configuration value is out of range or inconsistent."""


class ContractError(GgcnError, RuntimeError):
    """An API precondition on call order or state was violated."""


class NoSignalError(GgcnError, ValueError):
    """Coregistration has nothing to correlate (empty mask or flat gradient)."""


class OracleMisuseError(GgcnError, ValueError):
    """A dense test oracle was asked to handle a problem that is too large."""


class GenerationError(GgcnError, RuntimeError):
    """Synthetic scene generation could not satisfy its constraints."""


class DataError(GgcnError, ValueError):
    """Input files are missing, malformed or mutually incompatible."""
