"""Real-time background-music detection: featurization, compact CNN,
trainer, test-set synthesis, and evaluation harness."""

from .audio_io import AudioClip, FrameMatrix, condition, decode_wav, encode_wav
from .errors import MusicNetError
from .estimator import MusicNetClassifier
from .featurize import FeaturePlan, LogMelFeature, featurize_clip
from .model import MusicNetModel, load_weights_file, save_weights_file

__all__ = [
    "AudioClip",
    "FrameMatrix",
    "FeaturePlan",
    "LogMelFeature",
    "MusicNetClassifier",
    "MusicNetModel",
    "MusicNetError",
    "condition",
    "decode_wav",
    "encode_wav",
    "featurize_clip",
    "load_weights_file",
    "save_weights_file",
]

__version__ = "0.1.0"
