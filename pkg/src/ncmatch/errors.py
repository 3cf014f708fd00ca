"""Exception types raised across the package."""


class ContractViolation(ValueError):
    """An operation was called with inputs outside its documented domain."""


class CapacityError(MemoryError):
    """A tensor would exceed the configured element-count cap."""


class DegenerateConfigurationError(ValueError):
    """Correspondences do not constrain the model (coincident or coplanar rays)."""


class EstimationFailedError(RuntimeError):
    """Robust estimation found no model with enough support."""


class AmbiguityError(RuntimeError):
    """Several pose candidates are equally supported by cheirality."""

    def __init__(self, message, candidates=None):
        super().__init__(message)
        self.candidates = candidates or []


class GenerationError(RuntimeError):
    """The synthetic scene generator could not produce a valid configuration."""


class FileFormatError(ValueError):
    """A binary or text input file is malformed."""
