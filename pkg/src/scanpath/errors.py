"""Exception types shared across the toolkit.

The CLI maps these onto exit codes, so raising the right class matters:
data/format problems must be distinguishable from numerical failures.
"""


class ScanpathError(Exception):
    """Base class for all toolkit errors."""


class BoundsError(ScanpathError):
    """A coordinate fell outside its grid."""


class ParameterError(ScanpathError):
    """An argument violated a documented precondition (sigma <= 0, ...)."""


class ShapeError(ScanpathError):
    """Tensor or map shapes are inconsistent."""


class FormatError(ScanpathError):
    """A file failed to parse: bad magic, truncation, malformed row."""


class DataError(ScanpathError):
    """Inputs are structurally valid but semantically unusable."""


class ConfigMismatchError(ScanpathError):
    """A checkpoint or feature file disagrees with the active configuration."""


class NumericalError(ScanpathError):
    """A non-finite value appeared where the pipeline requires finite ones."""
