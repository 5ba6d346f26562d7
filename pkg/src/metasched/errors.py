"""Exception types shared across the package."""


class MetaschedError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(MetaschedError):
    """Invalid configuration, flag, or file contents. CLI exit code 1."""


class ShapeError(MetaschedError):
    """Dimension or length mismatch between arrays and their manifests."""


class NumericError(MetaschedError):
    """Non-finite value produced during training. CLI exit code 2.

    ``context`` carries whatever locates the failure (sample index,
    step index, checkpoint path).
    """

    def __init__(self, message, **context):
        super().__init__(message)
        self.context = dict(context)
