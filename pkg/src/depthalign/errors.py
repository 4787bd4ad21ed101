"""Exception types shared across the package.

The CLI maps these onto exit codes: configuration problems exit with 2,
dataset problems with 3, and numerical divergence during training with 4.
"""


class ValidationError(ValueError):
    """An input violates an operation's documented preconditions."""


class ConfigError(ValueError):
    """A configuration file or flag combination is invalid."""


class DataError(RuntimeError):
    """Base class for dataset loading problems."""


class MissingFileError(DataError):
    """A manifest entry or the manifest itself points at a missing file."""


class CorruptImageError(DataError):
    """An image or depth PNG exists but cannot be decoded."""


class ShapeMismatchError(DataError):
    """Image and depth grids of one sample disagree in size."""


class DepthOutOfRangeError(DataError):
    """Decoded depth exceeds the configured range by more than one quantization step."""


class ManifestError(DataError):
    """The manifest file itself is malformed."""


class CheckpointError(RuntimeError):
    """A checkpoint file is unreadable or has an unsupported version."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""
