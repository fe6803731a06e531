"""Exception hierarchy shared by the whole package.

Each error class carries the process exit code the CLI maps it to:
2 for bad input (config, arguments, malformed files), 3 for size caps,
4 for numerical degeneracies, 1 for anything else.
"""


class XlctError(Exception):
    exit_code = 1


class ValidationError(XlctError):
    """Invalid argument or inconsistent input."""

    exit_code = 2


class ConfigError(ValidationError):
    """Configuration file could not be parsed or validated."""


class GeometryError(ValidationError):
    """Geometric constraint violated (e.g. target outside the object support)."""


class FormatError(ValidationError):
    """On-disk artifact malformed: bad header, size mismatch, unknown dtype."""


class CapacityError(XlctError):
    """A size cap was exceeded; the message names the offending size."""

    exit_code = 3


class DegeneracyError(XlctError):
    """Numerically degenerate input."""

    exit_code = 4


class DegenerateOperatorError(DegeneracyError):
    """Operator norm estimate is zero (all-zero system matrix)."""


class NoPeakError(DegeneracyError):
    """Profile has no peak above its baseline."""


class TruncatedProfileError(DegeneracyError):
    """Profile never crosses the half level on one side of the peak."""


class DegenerateBackgroundError(DegeneracyError):
    """Background region has zero standard deviation."""


class EmptySegmentationError(DegeneracyError):
    """Thresholding an all-zero image yields no segmentation."""
