"""Exception hierarchy shared by all modules."""


class ScenVADError(Exception):
    """Base class for all package errors."""


class MissingFile(ScenVADError):
    pass


class SchemaError(ScenVADError):
    pass


class DuplicateId(ScenVADError):
    pass


class InsufficientVideos(ScenVADError):
    pass


class VideoTooShort(ScenVADError):
    pass


class SupervisionError(ScenVADError):
    """Raised when a split accessor would leak labels the protocol withholds."""


class InvalidAnomalyWindow(ScenVADError):
    pass


class InvalidConfig(ScenVADError):
    pass


class ShapeMismatch(ScenVADError):
    pass


class TooSmallForScales(ScenVADError):
    pass


class InsufficientScenarios(ScenVADError):
    pass


class InsufficientBlocks(ScenVADError):
    pass


class EmptyTaskSet(ScenVADError):
    pass


class EmptyInput(ScenVADError):
    pass


class DegenerateLabels(ScenVADError):
    pass


class NoEvaluableVideos(ScenVADError):
    pass


class NoPositives(ScenVADError):
    pass


class NoNegatives(ScenVADError):
    pass


class UnknownVideoId(ScenVADError):
    pass


class IoError(ScenVADError, OSError):
    pass
