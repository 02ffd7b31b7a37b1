"""Exception hierarchy. Each family maps to a CLI exit code."""


class ReidError(Exception):
    exit_code = 1


class ConfigError(ReidError):
    exit_code = 1


class DataError(ReidError):
    exit_code = 2


class ShapeError(DataError, ValueError):
    """Operand shapes do not line up."""


class MissingFileError(DataError):
    pass


class MagicMismatchError(DataError):
    pass


class TruncatedFileError(DataError):
    pass


class InconsistentShapeError(DataError):
    pass


class DuplicateIdError(DataError):
    pass


class NumericalError(ReidError):
    exit_code = 3


class TrainingDivergedError(NumericalError):
    def __init__(self, epoch, batch_index, loss):
        self.epoch = epoch
        self.batch_index = batch_index
        self.loss = loss
        super().__init__(
            f"non-finite loss {loss!r} at epoch {epoch}, batch index {batch_index}"
        )
