"""Exception hierarchy shared by every module."""


class RinnError(Exception):
    """Base class for all errors raised by this package."""


class LayoutError(RinnError, ValueError):
    pass


class DimensionError(RinnError, ValueError):
    pass


class ConfigurationError(RinnError, ValueError):
    pass


class ValidationError(RinnError, ValueError):
    pass


class ModelFormatError(RinnError):
    pass


class MalformedModelError(ModelFormatError):
    pass


class ModelVersionError(ModelFormatError):
    pass


class ModelShapeError(ModelFormatError):
    pass


class DivergenceError(RinnError):
    def __init__(self, stage, epoch):
        super().__init__(f"non-finite loss in stage {stage!r} at epoch {epoch}")
        self.stage = stage
        self.epoch = epoch


class StageOrderError(RinnError):
    pass


class PackingError(RinnError):
    pass


class PGMError(RinnError):
    pass


class PGMHeaderError(PGMError):
    pass


class PGMTruncatedError(PGMError):
    pass


class PGMValueError(PGMError):
    pass


class ManifestError(RinnError):
    pass
