"""Exception types shared across the package."""


class SketchError(Exception):
    """Base class for all errors raised by refsketch."""


class ShapeError(SketchError, ValueError):
    """Array shapes are incompatible."""


class DomainError(SketchError, ValueError):
    """A scalar argument or input lies outside its valid domain."""


class CapabilityError(SketchError, RuntimeError):
    """A backend cannot provide a requested layer, cache entry or feature."""


class NumericError(SketchError, FloatingPointError):
    """A non-finite value appeared. ``step`` holds the step index when known."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class BackendError(SketchError, RuntimeError):
    """An external backend call failed."""


class StageError(SketchError, RuntimeError):
    """Pipeline failure wrapped with the stage it occurred in."""

    def __init__(self, stage, cause):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause
