"""Exception hierarchy.  The CLI maps each family to an exit code."""


class AdmmqError(Exception):
    """Base class for all package errors."""


class ConfigError(AdmmqError, ValueError):
    """Invalid or unknown configuration."""


class DataError(AdmmqError, ValueError):
    """Malformed dataset, IDX file or checkpoint payload."""


class ShapeError(AdmmqError, ValueError):
    """Tensor shapes do not compose."""


class QuantizationError(AdmmqError, ValueError):
    """Projection or feasibility failure."""


class DivergenceError(AdmmqError, FloatingPointError):
    """Non-finite loss or gradient during training."""
