"""Exception hierarchy shared across the package."""


class TapnetError(Exception):
    """Base class for all errors raised by tapnet."""


class LabelingError(TapnetError):
    pass


class StratificationError(TapnetError):
    pass


class ShapeError(TapnetError, ValueError):
    pass


class SpecError(TapnetError, ValueError):
    pass


class BatchSizeError(TapnetError, ValueError):
    pass


class ConfigError(TapnetError):
    pass


class FormatError(TapnetError):
    """Malformed dataset or checkpoint file.

    ``offset`` is the byte position where parsing failed, if known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class AlignmentError(TapnetError):
    pass


class EvaluationError(TapnetError):
    pass


class AggregationError(TapnetError):
    pass


class TrainingError(TapnetError):
    pass
