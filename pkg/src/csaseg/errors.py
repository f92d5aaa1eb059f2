"""Exception hierarchy shared by every module.

The CLI maps these onto exit statuses, so each failure category gets its own
class rather than a bare ValueError.
"""


class CsaError(Exception):
    """Base class for all errors raised by csaseg."""


class DimensionError(CsaError, ValueError):
    """Shapes do not line up (mismatched extents, wrong rank, empty sizes)."""


class NumericError(CsaError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class DegenerateInputError(CsaError, ValueError):
    """Input is well-shaped but mathematically degenerate (e.g. a zero-norm row)."""


class ConfigError(CsaError, ValueError):
    """Invalid attention mode, slide configuration or model configuration."""


class FormatError(CsaError):
    """Malformed, truncated or corrupted file contents."""


class ModelError(CsaError):
    """Weight container is readable but does not describe a valid model."""


class DataError(CsaError, ValueError):
    """Label data outside the admissible range."""


class UndefinedMetricError(CsaError):
    """Metric cannot be computed because no class is present."""
