class VikanError(Exception):
    """Base class of every error raised by vikanformer."""


class ShapeError(VikanError, ValueError):
    pass


class PrecisionError(VikanError, TypeError):
    pass


class AutogradError(VikanError, RuntimeError):
    pass


class ConfigError(VikanError, ValueError):
    pass


class DataError(VikanError, ValueError):
    """Anything wrong with the MNIST files on disk."""


class IdxMagicError(DataError):
    pass


class IdxTruncatedError(DataError):
    pass


class IdxDimensionError(DataError):
    pass


class LabelRangeError(DataError):
    pass


class LengthMismatchError(DataError):
    pass


class CheckpointError(VikanError, ValueError):
    pass


class NonFiniteLossError(VikanError, ArithmeticError):
    def __init__(self, epoch: int, batch: int, variant: str, loss: float):
        self.epoch = epoch
        self.batch = batch
        self.variant = variant
        self.loss = loss
        super().__init__(f"non-finite loss {loss} at epoch={epoch} batch={batch} variant={variant}")
