"""Exception hierarchy shared by every iamnn module."""


class IamnnError(Exception):
    pass


class ShapeError(IamnnError, ValueError):
    pass


class RankError(ShapeError):
    """backward() called on a tensor that is not a scalar."""


class DegenerateBatchError(IamnnError, ValueError):
    pass


class NumericOverflowError(IamnnError, FloatingPointError):
    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class ConfigError(IamnnError, ValueError):
    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class DivergenceError(IamnnError, FloatingPointError):
    def __init__(self, message, step):
        super().__init__(message)
        self.step = step


class ContractError(IamnnError, ValueError):
    """A documented precondition was violated by the caller."""


class DataFormatError(IamnnError, ValueError):
    def __init__(self, message, offset=None):
        super().__init__(message)
        self.offset = offset


class CheckpointError(IamnnError):
    pass


class BadMagicError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError, ShapeError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass
