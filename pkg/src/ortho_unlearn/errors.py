"""Exception hierarchy. The CLI maps each family to an exit code."""


class UnlearnError(Exception):
    exit_code = 1


class ConfigError(UnlearnError, ValueError):
    exit_code = 2


class DatasetError(UnlearnError):
    exit_code = 3

    def __init__(self, path, message):
        self.path = str(path)
        super().__init__(f"{self.path}: {message}")


class BadMagicError(DatasetError):
    pass


class TruncatedFileError(DatasetError):
    pass


class CountMismatchError(DatasetError):
    pass


class NumericalError(UnlearnError, ArithmeticError):
    exit_code = 4


class ConvergenceError(NumericalError):
    pass


class DivergenceError(NumericalError):
    def __init__(self, epoch, loss):
        self.epoch = epoch
        self.loss = loss
        super().__init__(f"loss became non-finite ({loss}) at epoch {epoch}")


class ShapeError(UnlearnError, ValueError):
    pass
