class KoopmanTrainingError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(KoopmanTrainingError, ValueError):
    pass


class NumericError(KoopmanTrainingError, FloatingPointError):
    def __init__(self, message, index=None, step=None):
        super().__init__(message)
        self.index = index
        self.step = step


class IngestionError(KoopmanTrainingError, ValueError):
    def __init__(self, message, offset=None, path=None):
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"byte offset {offset}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.offset = offset
        self.path = path


class ConstructionError(KoopmanTrainingError):
    def __init__(self, message, group=None):
        super().__init__(message)
        self.group = group


class PredictionDiverged(NumericError):
    """A Koopman patch drove some parameter past the divergence cap."""
