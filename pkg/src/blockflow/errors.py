"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: ConfigurationError / InputError /
InvariantViolation / NumericalError / TrainingDivergedError -> 3,
FormatError (and OSError) -> 4.
"""


class BlockflowError(Exception):
    """Base class for all package errors."""


class ConfigurationError(BlockflowError):
    """A config or shape contract was violated (caller bug, not data)."""


class InputError(BlockflowError):
    """User-supplied data is out of contract (bad token id, frame mismatch, ...)."""


class InvariantViolation(BlockflowError):
    """An internal invariant failed (fully-masked row, degenerate probe, ...)."""


class BoundaryProbeError(InvariantViolation):
    """Receptive-field probe placed too close to a sequence boundary."""


class FormatError(BlockflowError):
    """A file on disk does not parse as the expected format."""


class NumericalError(BlockflowError):
    """NaN or non-finite values appeared mid-computation."""


class TrainingDivergedError(BlockflowError):
    """Training loss exceeded the divergence watchdog threshold."""
