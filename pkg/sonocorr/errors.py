"""Exception hierarchy shared by every sonocorr module."""


class SonoError(Exception):
    """Base class for all errors raised by sonocorr."""


class ConfigError(SonoError, ValueError):
    pass


class RangeError(SonoError, ValueError):
    """A requested time window falls outside the recording."""


class InsufficientDataError(SonoError, ValueError):
    pass


class EmptyInputError(SonoError, ValueError):
    pass


class ShapeError(SonoError, ValueError):
    pass


class TokenLookupError(SonoError, IndexError):
    pass


class DegenerateInputError(SonoError, ValueError):
    """Metric input without mass, variance or support."""


class CheckpointError(SonoError, RuntimeError):
    pass


class CorpusFormatError(SonoError, ValueError):
    def __init__(self, path, line_no: int, reason: str):
        super().__init__(f"{path}:{line_no}: {reason}")
        self.path = path
        self.line_no = line_no


class TrainingDivergedError(SonoError, RuntimeError):
    def __init__(self, step: int, batch_ids: list[tuple[str, float]]):
        super().__init__(f"non-finite loss at step {step} for batch {batch_ids}")
        self.step = step
        self.batch_ids = batch_ids
