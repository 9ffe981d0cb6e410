"""Overlapped speech detection with a CRNN and overlap-aware diarization relabelling."""

from osdkit._backend import BACKEND
from osdkit.model import ModelConfig, build_model, forward, load_checkpoint, save_checkpoint

__all__ = [
    "BACKEND",
    "ModelConfig",
    "build_model",
    "forward",
    "load_checkpoint",
    "save_checkpoint",
]
__version__ = "0.1.0"
