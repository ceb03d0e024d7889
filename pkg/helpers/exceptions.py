class TensorError(Exception):
    """Raised when a tensor operation cannot be carried out"""

    pass


class DimensionError(TensorError):
    """Raised when operand shapes or axes are incompatible"""

    pass


class DivideByZeroError(TensorError):
    """Raised when an elementwise division meets an exact zero divisor"""

    pass


class GradientError(TensorError):
    """Raised when backward is requested on something that is not a scalar loss"""

    pass


class DataError(Exception):
    """Raised when scene data cannot be produced, read or written"""

    def __init__(self, message: str):
        self.message = message
        super().__init__(self.message)


class ParseError(DataError):
    """Raised when an annotation or image file is malformed"""

    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        self.path = path
        self.line = line
        location = ""
        if path is not None:
            location = f"{path}:{line}: " if line is not None else f"{path}: "
        elif line is not None:
            location = f"line {line}: "
        super().__init__(f"{location}{message}")


class DatasetIOError(DataError):
    """Raised when a dataset directory cannot be read or written"""

    pass


class GenerationError(DataError):
    """Raised when scene generation keeps producing degenerate geometry"""

    pass


class CheckpointError(Exception):
    """Raised when a checkpoint or SMRT container is unreadable"""

    pass


class IncompatibleCheckpointError(CheckpointError):
    """Raised when a checkpoint manifest does not fit the requested architecture"""

    pass


class TrainingError(Exception):
    """Raised when a training run cannot proceed (bad dataset, non-finite loss)"""

    pass


class CheckFailure(Exception):
    """Raised when a verification command finds failing checks"""

    def __init__(self, message: str, failures: list[str] | None = None):
        self.failures = failures or []
        super().__init__(message)
