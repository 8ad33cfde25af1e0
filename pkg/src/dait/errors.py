"""Exception hierarchy shared by every module."""


class DaitError(Exception):
    """Base class for all library errors."""


class ConfigError(DaitError):
    """Bad configuration: unknown key, wrong type, unresolvable reference."""


class ContractError(DaitError, ValueError):
    """An operation was called with inputs violating its preconditions."""


class DegenerateInputError(ContractError):
    """Input is well-shaped but numerically degenerate (zero norm, zero variance)."""


class BackendError(DaitError):
    """A requested encoder backend/adapter is unavailable."""


class IngestionError(DaitError):
    """Dataset on disk is malformed or unreadable."""


class TrainingError(DaitError):
    """Training diverged or otherwise failed at runtime.

    Attributes:
        last_checkpoint: Path of the last good checkpoint, if any was written.
        diagnostics: Free-form details (epoch, batch, offending values).
    """

    def __init__(self, message, last_checkpoint=None, diagnostics=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint
        self.diagnostics = diagnostics or {}


class FreezeViolation(TrainingError):
    """A frozen parameter group changed during training."""
