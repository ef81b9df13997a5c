"""Exception types shared across the toolkit.

The CLI maps these onto exit codes: ConfigError -> 2, DataError and its
subclasses -> 3, NumericError and TrainingError -> 4.
"""


class ShapeError(ValueError):
    """Operands with non-conforming shapes were passed to an array op."""


class NumericError(ArithmeticError):
    """A computation produced non-finite values."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration / flag combination."""


class DataError(ValueError):
    """A dataset file is missing, malformed, or inconsistent."""


class ChecksumError(DataError):
    """Stored checksum does not match the file contents."""


class CovarianceError(NumericError):
    """A covariance matrix is not positive definite where it must be."""


class SingularityError(NumericError):
    """A linear transform is numerically singular."""


class DegenerateWeightsError(NumericError):
    """All importance weights vanished; resampling is undefined."""


class TrainingError(RuntimeError):
    """Optimization diverged (non-finite loss or gradients)."""

    def __init__(self, message: str, epoch: int | None = None, step: int | None = None):
        super().__init__(message)
        self.epoch = epoch
        self.step = step
