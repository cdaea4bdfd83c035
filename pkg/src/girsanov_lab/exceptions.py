"""Exception hierarchy for girsanov_lab."""


class GirsanovLabError(Exception):
    """Base class for all package errors."""


class NumericError(GirsanovLabError, ArithmeticError):
    """A coefficient or integrator produced a non-finite value."""

    def __init__(self, message, node=None):
        super().__init__(message if node is None else f"{message} (node {node})")
        self.node = node


class ModelError(GirsanovLabError):
    """The supplied coefficient model violates a structural hypothesis.

    Raised, for instance, when ``sigma @ gamma = b - a`` has no solution at a
    node, so the drift difference cannot be expressed through the noise.
    """

    def __init__(self, message, node=None):
        super().__init__(message if node is None else f"{message} (node {node})")
        self.node = node


class UnsupportedModelError(ModelError):
    """The operation needs a structural property the model lacks."""


class RangeConditionError(ModelError):
    """A nonlinearity has a component outside the range of sqrt(Q)."""


class DriftIntegrabilityError(ModelError):
    """gamma_a = sigma^+ a or gamma_b = sigma^+ b is not finite along a path.

    The W-free density needs both to be finite; the W-based weight only needs
    their difference, so this does not invalidate the main weighting route.
    """


class ConfigError(GirsanovLabError, ValueError):
    """Invalid experiment configuration."""

    def __init__(self, message, key=None):
        super().__init__(message if key is None else f"{message} [key: {key}]")
        self.key = key
