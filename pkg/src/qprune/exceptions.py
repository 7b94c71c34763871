"""Exception types shared across the package."""


class QPruneError(Exception):
    """Base class for all library errors."""


class ShapeError(QPruneError, ValueError):
    """Operands have incompatible shapes."""


class FormatError(QPruneError, ValueError):
    """A serialized file has a bad magic number, version, or structure."""


class TruncationError(FormatError):
    """A serialized file ends before its declared payload."""


class ConversionError(QPruneError, ValueError):
    """A real model cannot be converted to quaternion form."""


class DegenerateLayerError(QPruneError, ValueError):
    """A layer is too small for the requested importance method."""


class PlanError(QPruneError, ValueError):
    """A prune plan targets invalid layers or filters."""


class SurgeryError(QPruneError, ValueError):
    """A prune plan is inconsistent with the model it is applied to."""


class DivergenceError(QPruneError, RuntimeError):
    """Training produced a non-finite loss."""


class UndefinedMetricError(QPruneError, ValueError):
    """A metric is undefined for the given inputs (e.g. AP with no positives)."""


class ConfigError(QPruneError, ValueError):
    """Invalid command-line or config-file settings (CLI exit code 2)."""
