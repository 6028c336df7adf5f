"""Exception taxonomy shared by the whole package.

The CLI maps these onto process exit codes: verification failures exit 1,
bad input (config, dataset, shapes) exits 2, checkpoint problems exit 3.
"""


class TrifusionError(Exception):
    """Base class for all package errors."""

    category = "error"


class ShapeError(TrifusionError):
    """Operands have incompatible shapes."""

    category = "input"


class ContractError(TrifusionError):
    """A documented precondition was violated by the caller."""

    category = "input"


class NumericError(TrifusionError):
    """NaN or other non-finite values where finite numbers are required."""

    category = "verification"


class ConfigError(TrifusionError):
    """Invalid or inconsistent configuration."""

    category = "input"


class IngestError(TrifusionError):
    """Dataset directory or image file cannot be read."""

    category = "input"


class CheckpointError(TrifusionError):
    """Checkpoint file is malformed, truncated, or mismatched."""

    category = "checkpoint"


class VerificationError(TrifusionError):
    """A self-check (gradient suite, invariant) failed."""

    category = "verification"
