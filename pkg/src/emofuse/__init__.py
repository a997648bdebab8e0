"""Audio-visual emotion recognition: preprocessing, models, training, eval."""

from .errors import (BalanceError, ConfigError, CropError, DecodeError,
                     EmofuseError, EmptyInputError, LabelError, ManifestError,
                     SamplingError, ShapeError, TooShortError)
from .signal import SegmentSpec, Spectrogram, Waveform
from .vision import CropRegion, VideoClip
from .dataset import ContrastivePair, Example, Manifest
from .models import ModelConfig
from .training import TrainConfig, TrainingHistory

__version__ = "1.0.0"

__all__ = [
    "BalanceError", "ConfigError", "ContrastivePair", "CropError",
    "CropRegion", "DecodeError", "EmofuseError", "EmptyInputError", "Example",
    "LabelError", "Manifest", "ManifestError", "ModelConfig", "SamplingError",
    "SegmentSpec", "ShapeError", "Spectrogram", "TooShortError", "TrainConfig",
    "TrainingHistory", "VideoClip", "Waveform", "__version__",
]
