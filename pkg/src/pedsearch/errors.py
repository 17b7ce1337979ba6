"""Shared exception types."""


class PedSearchError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(PedSearchError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(PedSearchError):
    """A documented precondition was violated by the caller."""


class ConfigError(PedSearchError):
    """A configuration value is invalid or inconsistent."""


class OracleInvalidError(PedSearchError):
    """Finite differencing was asked to check a non-deterministic function."""


class CheckpointError(PedSearchError):
    """A checkpoint file is malformed or incompatible with the config."""


class TrainingAbort(PedSearchError):
    """Training hit a non-finite loss; carries the offending term name."""

    def __init__(self, term: str, message: str | None = None):
        self.term = term
        super().__init__(message or f"non-finite loss in term '{term}'")
