"""Exception types shared across the package."""


class FormatError(ValueError):
    """A binary container is malformed.

    Carries the byte offset at which parsing failed, when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TrainingFailure(RuntimeError):
    """Training did not reach its target within the configured budget."""

    def __init__(self, message: str, final_accuracy: float | None = None,
                 final_loss: float | None = None):
        super().__init__(message)
        self.final_accuracy = final_accuracy
        self.final_loss = final_loss


class NumericalFailure(ArithmeticError):
    """A computation produced non-finite values."""


class DegenerateSignalError(ValueError):
    """A zero-power vector cannot be transmitted at finite SNR."""
