"""Exception hierarchy shared across the package."""


class AcdlError(Exception):
    """Base class for every error raised on purpose by this package."""


class ShapeError(AcdlError, ValueError):
    """Operand extents are incompatible with an operation."""


class NonFiniteError(AcdlError, FloatingPointError):
    """An operation produced NaN or Inf."""


class GraphError(AcdlError, RuntimeError):
    """Misuse of the autodiff graph (e.g. backward from a non-scalar)."""


class TrainingDiverged(AcdlError, RuntimeError):
    def __init__(self, epoch, detail=""):
        self.epoch = epoch
        msg = f"training diverged at epoch {epoch}"
        super().__init__(f"{msg}: {detail}" if detail else msg)


class DatasetError(AcdlError, ValueError):
    """Dataset layout or content problem; message names the offending path."""


class ImageFormatError(AcdlError, ValueError):
    """Malformed or truncated image data."""


class UnsupportedFormatError(ImageFormatError):
    """Well-formed image in a variant this package does not read (e.g. maxval != 255)."""


class CheckpointFormatError(AcdlError, ValueError):
    """Bad magic, unknown version or unreadable manifest."""


class CheckpointIntegrityError(CheckpointFormatError):
    """Manifest and payload disagree."""


class ConfigError(AcdlError, ValueError):
    """Invalid configuration file or override."""


class MissingArtifactError(AcdlError, FileNotFoundError):
    """A prerequisite file from an earlier pipeline step is absent."""

    def __init__(self, path, what="artifact"):
        self.path = str(path)
        super().__init__(f"missing {what}: {self.path}")
