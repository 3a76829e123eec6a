"""Exception hierarchy shared by every mcdut module."""


class McdutError(Exception):
    """Base class for all errors raised by this package."""


class InvalidConfigError(McdutError, ValueError):
    """A configuration value or call argument violates its contract."""


class InvalidInputError(McdutError, ValueError):
    """An input tensor or image has the wrong shape, range or channel count."""


class DegenerateInputError(McdutError, ValueError):
    """The input is numerically degenerate (e.g. a zero-length vector)."""


class ConsistencyError(McdutError, RuntimeError):
    """Internal bookkeeping disagrees: misaligned layers, patches or shapes."""


class DivergedTrainingError(McdutError, RuntimeError):
    """A loss term became non-finite during training."""

    def __init__(self, term: str, value: float, step: int | None = None):
        self.term = term
        self.value = value
        self.step = step
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"loss term {term!r} is non-finite ({value}){where}")


class DatasetError(McdutError, OSError):
    """The dataset layout is missing or an image cannot be decoded."""


class AssetError(McdutError, OSError):
    """A required external asset (checkpoint, extractor weights) is unavailable."""


class CheckpointError(McdutError, RuntimeError):
    """A checkpoint is incompatible with the requested model or format."""


class NumericalError(McdutError, ArithmeticError):
    """A metric computation hit a numerically invalid state."""
