"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """A config field violates its documented constraint."""


class FormatError(RuntimeError):
    """A serialized artifact (dataset blob, manifest, checkpoint) is malformed."""


class CapacityError(RuntimeError):
    """A sequence would exceed the model's maximum length."""


class DivergenceError(RuntimeError):
    """Training produced NaN or a persistently increasing smoothed loss."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class VerificationError(RuntimeError):
    """A numerical self-check (gradient check, oracle comparison) failed."""
