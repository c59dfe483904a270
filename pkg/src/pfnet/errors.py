"""Exception hierarchy shared by every pfnet module."""


class PfnetError(Exception):
    """Base class for all errors raised by pfnet."""


class ConfigError(PfnetError, ValueError):
    """An invalid specification, scheme name, or option value."""


class ShapeError(PfnetError, ValueError):
    """Tensor shapes do not fit the operation."""


class GeometryError(ShapeError):
    """A pooling window would see only padding."""


class UsageError(PfnetError, RuntimeError):
    """An API was called out of order or with foreign objects."""


class FormatError(PfnetError, ValueError):
    """A file on disk does not match its declared binary or text format."""


class ResourceError(PfnetError, RuntimeError):
    """A run needs more memory than the machine can give it."""

    def __init__(self, message, batch=None):
        super().__init__(message)
        self.batch = batch


class TrainingDiverged(PfnetError, RuntimeError):
    """Loss became NaN or infinite during training."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
