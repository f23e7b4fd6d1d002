"""Key-based attribution of generative speech models.

Generates mutually orthogonal data-compliant keys, trains additive
watermarks for user-end model copies, evaluates attribution metrics and
robustness under adversarial post-processing, and operates a persistent key
registry that attributes audio clips to responsible users.
"""

from .audio import AudioClip, Dataset, MelSpectrogram, read_wav, synth_dataset, write_wav
from .errors import SpeechmarkError
from .keys import Key, KeySet, check_conditions, classifier_score, generate_key
from .metrics import attributability, collusion_check, distinguishability, frechet_distance
from .registry import AttributionResult, RegistryStore, attribute, register
from .watermark import SampleSource, WatermarkModel, apply, train, train_robust

__version__ = "0.1.0"

__all__ = [
    "AudioClip",
    "Dataset",
    "MelSpectrogram",
    "Key",
    "KeySet",
    "WatermarkModel",
    "SampleSource",
    "RegistryStore",
    "AttributionResult",
    "SpeechmarkError",
    "read_wav",
    "write_wav",
    "synth_dataset",
    "classifier_score",
    "generate_key",
    "check_conditions",
    "train",
    "train_robust",
    "apply",
    "distinguishability",
    "attributability",
    "frechet_distance",
    "collusion_check",
    "register",
    "attribute",
    "__version__",
]
