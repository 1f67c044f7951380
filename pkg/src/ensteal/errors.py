"""Shared exception types."""


class InvalidInputError(ValueError):
    """An operation received data that violates its preconditions."""


class InvalidConfigError(ValueError):
    """A configuration is structurally or numerically invalid."""


class TrainingDivergedError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch: int, detail: str = ""):
        self.epoch = epoch
        msg = f"non-finite loss at epoch {epoch}"
        if detail:
            msg = f"{msg}: {detail}"
        super().__init__(msg)


class BudgetExhaustedError(RuntimeError):
    """A query request exceeds the remaining victim-query budget."""


class AttackFailedError(RuntimeError):
    """Adversarial example generation hit a non-finite gradient."""


class RemoteUnavailableError(RuntimeError):
    """The remote victim service could not be reached after retries."""


class StageError(RuntimeError):
    """A pipeline stage failed; carries the stage name for reporting."""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {cause}")
