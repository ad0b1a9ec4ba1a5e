"""Exception types shared across the package.

Everything user-facing derives from :class:`BlurLabError` so callers can
catch one base type.  Parameter problems additionally derive from
``ValueError`` to stay friendly to generic numeric code.
"""


class BlurLabError(Exception):
    """Base class for all errors raised by blurlab."""


class InvalidParameterError(BlurLabError, ValueError):
    """An argument is outside its documented domain."""


class DegenerateKernelError(BlurLabError, ValueError):
    """A kernel could not be normalized (non-positive total weight)."""


class ShapeError(BlurLabError, ValueError):
    """An array has a shape a layer or operation cannot accept."""


class CheckpointError(BlurLabError):
    """A model checkpoint is missing, corrupt, or mismatched."""


class TrainingDivergenceError(BlurLabError, RuntimeError):
    """The training loss became non-finite."""


class KernelFormatError(BlurLabError, ValueError):
    """A PSF kernel file is malformed."""


class ImageFormatError(BlurLabError, ValueError):
    """A PPM/PGM image file is malformed."""


class DatasetFormatError(BlurLabError, ValueError):
    """An on-disk dataset index or file is malformed."""


class ConfigError(BlurLabError, ValueError):
    """An experiment config file is malformed or incomplete."""
