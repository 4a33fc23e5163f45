"""Exception types shared across the toolkit.

Every error raised by oodkit derives from OodkitError so callers (and the
CLI) can map failures to exit statuses without matching on messages.
"""


class OodkitError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(OodkitError, ValueError):
    """Operand shapes or dimensions do not compose."""


class SingularMatrixError(OodkitError, ValueError):
    """SPD factorization failed; carries the failing pivot index."""

    def __init__(self, pivot: int, message: str | None = None):
        self.pivot = pivot
        super().__init__(message or f"factorization failed at pivot {pivot}")


class MissingClassError(OodkitError, ValueError):
    """A class index received no samples; carries the class index."""

    def __init__(self, class_index: int, message: str | None = None):
        self.class_index = class_index
        super().__init__(message or f"class {class_index} has no samples")


class InsufficientDataError(OodkitError, ValueError):
    """Too few samples for the requested statistic."""


class LabelError(OodkitError, ValueError):
    """A label is outside the valid class range."""


class DivergenceError(OodkitError, FloatingPointError):
    """Training produced a non-finite value; carries the parameter name."""

    def __init__(self, param_name: str, message: str | None = None):
        self.param_name = param_name
        super().__init__(message or f"non-finite values in {param_name}")


class ConsistencyError(OodkitError, ValueError):
    """A forward trace does not belong to the network it was used with."""


class DetectorStateError(OodkitError, RuntimeError):
    """A detector was used before fitting/calibration completed."""


class ValidationDataError(OodkitError, ValueError):
    """A validation set is empty or degenerate."""


class FormatError(OodkitError, ValueError):
    """A file does not conform to the expected on-disk format."""


class CorruptionError(OodkitError, ValueError):
    """A file is truncated or its payload size is inconsistent."""


class DataError(OodkitError, ValueError):
    """A source dataset cannot support the requested operation."""


class ChannelError(OodkitError, ValueError):
    """An image operation requires a channel layout the input lacks."""


class SplitError(OodkitError, ValueError):
    """A split plan produces an empty or invalid partition."""


class ConfigError(OodkitError, ValueError):
    """Experiment configuration is missing or inconsistent."""


class DisjointnessError(OodkitError, ValueError):
    """Two dataset roles that must be disjoint share an image.

    Carries the first colliding index pair (index_a, index_b).
    """

    def __init__(self, role_a: str, role_b: str, index_a: int, index_b: int):
        self.role_a = role_a
        self.role_b = role_b
        self.index_a = index_a
        self.index_b = index_b
        super().__init__(
            f"{role_a}[{index_a}] is bit-identical to {role_b}[{index_b}]"
        )
