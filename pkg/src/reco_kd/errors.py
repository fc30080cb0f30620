"""Exception types shared across the package.

Everything input-shaped derives from ValueError so callers can catch broadly;
the trainer's divergence signal derives from RuntimeError because it reports a
failed run, not a bad argument.
"""


class ShapeMismatchError(ValueError):
    """Operand shapes cannot be combined; message names both shapes."""


class InvalidAxisError(ValueError):
    """Reduction axis out of range or repeated."""


class DegenerateInputError(ValueError):
    """Numerically unusable input (near-zero denominator, non-positive log, ...)."""


class NonScalarLossError(ValueError):
    """backward() called on a tensor with more than one element."""


class TemperatureError(ValueError):
    """Softmax temperature must be strictly positive."""


class GeometryError(ValueError):
    """Impossible spatial geometry (empty conv output, region does not fit, ...)."""


class DivisibilityError(ValueError):
    """A dimension does not divide as required (channel groups, strides)."""


class UncoveredVoxelError(ValueError):
    """A voxel is covered by no region mask."""


class NiftiError(ValueError):
    """Malformed or unsupported NIfTI-1 file; `field` names the offending header field."""

    def __init__(self, message: str, field: str = ""):
        super().__init__(message)
        self.field = field


class PlanError(ValueError):
    """Inconsistent network plan."""


class ConfigError(ValueError):
    """Invalid configuration; `path` is the dotted field path."""

    def __init__(self, message: str, path: str = ""):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


class DivergenceError(RuntimeError):
    """Training loss became non-finite; `step` is the failing optimizer step."""

    def __init__(self, message: str, step: int = -1):
        super().__init__(message)
        self.step = step
