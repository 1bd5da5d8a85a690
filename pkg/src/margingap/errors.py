"""Exception types shared across the package."""


class MarginGapError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(MarginGapError, ValueError):
    """An array's shape is incompatible with the layer or dataset it feeds."""


class InvalidPairError(MarginGapError, ValueError):
    """A class pair (i, j) with i == j or out-of-range indices."""


class DegenerateGradientError(MarginGapError, ArithmeticError):
    """Logit-difference gradient norm below the noise floor; distance undefined."""


class DegenerateVariationError(MarginGapError, ArithmeticError):
    """Total variation of layer activations is (numerically) zero."""


class EmptyDistributionError(MarginGapError, ValueError):
    """No samples survive the margin-distribution filtering rules."""


class NonpositiveFeatureError(MarginGapError, ValueError):
    """Log transform requested for a statistic that is not strictly positive."""


class UnderdeterminedError(MarginGapError, ValueError):
    """Fewer observations than the regression needs (n <= dim + 1)."""


class ZeroVarianceError(MarginGapError, ValueError):
    """A quantity that must vary (target, feature) is constant."""


class DivergenceError(MarginGapError, RuntimeError):
    """Training loss stayed non-finite for several consecutive epochs."""


class ConfigError(MarginGapError, ValueError):
    """An invalid or forbidden configuration (maps to CLI exit code 2)."""
