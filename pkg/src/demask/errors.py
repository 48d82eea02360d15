"""Exception types shared across the package."""


class DemaskError(Exception):
    """Base class for all package-specific errors."""


class ShapeMismatchError(DemaskError, ValueError):
    """Operands do not share the required spatial/channel dimensions."""


class ImageFormatError(DemaskError, ValueError):
    """A file exists but does not decode as a supported image."""


class ParameterError(DemaskError, ValueError):
    """A scalar parameter violates its allowed range."""


class ConfigError(DemaskError, ValueError):
    """A model/build configuration violates its invariants."""


class AnnotationError(DemaskError, ValueError):
    """A polygon annotation is degenerate or malformed."""


class TemplateError(DemaskError, ValueError):
    """A mask template cannot produce a valid overlay polygon."""


class DatasetError(DemaskError, ValueError):
    """Dataset generation or loading produced no usable entries."""


class DegenerateMaskError(DemaskError, ValueError):
    """An operation that divides by the mask area received an empty mask."""


class TrainingError(DemaskError, RuntimeError):
    """A training run cannot start or continue (bad data, bad state)."""


class NumericError(DemaskError, RuntimeError):
    """A loss term became non-finite; the message names the term."""


class CheckpointError(DemaskError, RuntimeError):
    """A checkpoint file is unreadable, truncated, or inconsistent."""


class EvaluationError(DemaskError, ValueError):
    """Evaluation was asked to run over an empty or unusable manifest."""
