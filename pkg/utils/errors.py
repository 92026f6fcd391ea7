from typing import Optional


class MetaDistillError(Exception):
    pass


class DimensionError(MetaDistillError, ValueError):
    pass


class ParameterError(MetaDistillError, ValueError):
    pass


class InputError(MetaDistillError, ValueError):
    pass


class ConfigError(MetaDistillError, ValueError):
    def __init__(self, key: str, message: str):
        super(ConfigError, self).__init__(f"{key}: {message}")
        self.key = key


class FormatError(MetaDistillError, ValueError):
    def __init__(self, message: str, offset: Optional[int]=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super(FormatError, self).__init__(message)
        self.offset = offset


class NumericError(MetaDistillError, ArithmeticError):
    pass


class GraphError(MetaDistillError, RuntimeError):
    pass


class IsolationError(MetaDistillError, RuntimeError):
    pass


class TrainingAborted(MetaDistillError, RuntimeError):
    def __init__(self, message: str, checkpoint_path: Optional[str]=None):
        super(TrainingAborted, self).__init__(message)
        self.checkpoint_path = checkpoint_path
