"""Exception types shared across the package."""


class OarsegError(Exception):
    """Base class for all package-specific errors."""


class DimsError(OarsegError):
    """Grid dimensions of two volumes/masks do not match."""


class ShapeError(OarsegError):
    """Tensor shape violates a layer or network contract."""


class RangeError(OarsegError):
    """Box or index lies outside the valid grid range."""


class ResampleError(OarsegError):
    """Input volume too degenerate to resample."""


class DownsampleError(OarsegError):
    """Dimensions not divisible by the requested downsampling factor."""


class EmptyStructureError(OarsegError):
    """A ground-truth mask required to contain foreground is empty."""


class EmptySetError(OarsegError):
    """A point set required to be nonempty is empty."""


class ConfigError(OarsegError):
    """Configuration value violates an invariant."""


class TrainError(OarsegError):
    """Training cannot proceed (e.g. no usable cases)."""


class ParseError(OarsegError):
    """File could not be parsed; message carries line/field context."""


class CorruptModelError(OarsegError):
    """Model file failed checksum or structural validation."""


class PhantomSpecError(OarsegError):
    """Synthetic case specification is infeasible."""
