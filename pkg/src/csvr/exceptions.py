"""Exception hierarchy shared by every csvr module."""


class CSVRError(Exception):
    """Base class for all package errors."""


class ConfigSyntaxError(CSVRError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ConfigValueError(CSVRError, ValueError):
    def __init__(self, field, message=None):
        self.field = field
        super().__init__(field if message is None else f"{field}: {message}")


class DataShapeError(CSVRError, ValueError):
    pass


class ZeroNormError(CSVRError, ZeroDivisionError):
    pass


class GradientUnavailableError(CSVRError, RuntimeError):
    pass


class TrainingDivergedError(CSVRError, RuntimeError):
    def __init__(self, message, checkpoint_path=None):
        self.checkpoint_path = checkpoint_path
        super().__init__(message)


class CheckpointVersionError(CSVRError):
    pass


class CheckpointFormatError(CSVRError):
    pass
