"""Exception hierarchy shared by all mvseg modules."""


class MVSegError(Exception):
    """Base class for every error raised by mvseg."""


class ShapeError(MVSegError, ValueError):
    """Operand extents are incompatible with the operation."""


class ConfigError(MVSegError, ValueError):
    """A configuration value violates its documented invariant."""


class NumericError(MVSegError, ArithmeticError):
    """A NaN/Inf or otherwise undefined numeric state was reached."""


class ContractError(MVSegError, ValueError):
    """A call violated an interface precondition (e.g. missing axial view)."""


class GradCheckError(MVSegError):
    """Gradient checking could not be carried out."""


class FormatError(MVSegError, ValueError):
    """An on-disk dataset file is malformed."""


class CheckpointError(MVSegError, ValueError):
    """A checkpoint file is malformed or incompatible with the model."""


class ResampleError(MVSegError, ValueError):
    """A volume cannot be resampled onto the requested grid."""


class MetricUndefinedError(MVSegError, ValueError):
    """A metric is undefined for the given masks (e.g. empty reference)."""


class RegionError(MVSegError, ValueError):
    """A slice range cannot be split into apex/mid/base thirds."""


class StatsError(MVSegError, ValueError):
    """Statistical routine received unusable input."""


class DataError(MVSegError, ValueError):
    """Requested data is not available in the dataset."""
