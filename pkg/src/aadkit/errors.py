"""Shared exception types.

Error categories map to failure kinds rather than modules: shape problems,
bad configuration values, missing state, violated call contracts, bad data,
and numerical breakdowns each get their own class so callers can filter.
"""


class AADError(Exception):
    """Base class for all package errors."""


class DimensionError(AADError, ValueError):
    """Operand shapes are inconsistent with the operation."""


class ConfigurationError(AADError, ValueError):
    """A parameter value is outside the supported range or combination."""


class ContractError(AADError, ValueError):
    """A call precondition was violated (e.g. signal too short)."""


class StateError(AADError, RuntimeError):
    """Operation requires state that has not been initialized."""


class DataError(AADError, ValueError):
    """Input data is malformed (non-finite, wrong kind)."""


class DegenerateInputError(AADError, ValueError):
    """Input is degenerate for the requested operation (e.g. constant)."""


class NumericError(AADError, RuntimeError):
    """A numerical routine failed beyond the configured safeguards."""


class TrainingError(AADError, RuntimeError):
    """Model training diverged or could not proceed."""
