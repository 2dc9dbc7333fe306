"""Exception types shared across the package."""


class QuokaError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(QuokaError, ValueError):
    """Tensor shapes are inconsistent with the requested operation."""


class DegenerateInputError(QuokaError, ValueError):
    """Input is structurally empty: fully masked row, empty top-k input,
    zero-length reduction axis."""


class BoundsError(QuokaError, IndexError):
    """Index outside the valid range."""


class ValidationError(QuokaError, ValueError):
    """Value-level contract violation: non-finite tensors, non-orthonormal
    projections, malformed configs or workload specs."""


class StreamError(QuokaError, ValueError):
    """QKV supplier is inconsistent across layers or with the config."""


class MeasurementError(QuokaError, RuntimeError):
    """Timing measurement cannot be trusted (clock resolution too coarse)."""


class ConfigError(QuokaError, ValueError):
    """Command-line / JSON configuration could not be parsed or validated."""
