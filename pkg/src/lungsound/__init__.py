"""Lung-sound assessment workbench: DSP, features, transformer classifier
with cross-device MixStyle, experiment harness, and inference service."""

from .errors import LungSoundError

__version__ = "0.1.0"

__all__ = ["LungSoundError", "__version__"]
