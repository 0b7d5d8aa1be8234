"""Exception types shared across the package."""


class LungSoundError(Exception):
    """Base class for all package errors."""


class InvalidInput(LungSoundError):
    """Operation received data it cannot process (empty, non-finite, wrong shape)."""


class InvalidCutoff(LungSoundError):
    """Filter cutoff outside (0, Nyquist)."""


class LabelError(LungSoundError):
    """Unknown or unusable class label."""


class StratificationError(LungSoundError):
    """A class has too few samples to stratify across the requested folds."""


class ConfigError(LungSoundError):
    """Configuration inconsistent with the data it is applied to."""


class NumericalError(LungSoundError):
    """Non-finite values appeared where finite math was required.

    Carries a `diagnostics` dict with whatever context the raiser could attach.
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class NotFoundError(LungSoundError):
    """Referenced entity does not exist."""


class BadAudioError(LungSoundError):
    """Uploaded bytes do not decode to audio."""


class TooShortError(LungSoundError):
    """Uploaded recording is shorter than the service minimum."""


class PreconditionFailedError(LungSoundError):
    """Operation requires state the session is not in."""


class ServiceUnavailableError(LungSoundError):
    """Backing storage or model is not available."""
