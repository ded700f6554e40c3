"""Error taxonomy shared across the package.

Every public operation raises one of these (or a subclass) so callers can
tell malformed inputs apart from internal bugs. CLI entry points catch the
ValueError family and turn it into a one-line diagnostic plus a nonzero
exit code; InternalError is allowed to propagate with a traceback.
"""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ValidationError(ValueError):
    """Tensor values violate a documented domain (non-spike input, NaN, ...)."""


class ConfigError(ValueError):
    """A configuration field is out of range or inconsistent with another."""


class AlignmentError(ValueError):
    """Teacher/student structures cannot be aligned (depths, heads, dims)."""


class EvaluationError(ValueError):
    """A numeric probe (finite differences, profiling) hit a non-finite value."""


class InternalError(RuntimeError):
    """Invariant broken inside the package; indicates a bug, not bad input."""
