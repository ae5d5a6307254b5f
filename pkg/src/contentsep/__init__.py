"""Speaker-conditioned content separation for speech-based screening.

Modules: ``audio`` (loading, trimming, mel features), ``speaker_encoder``
(GE2E encoder and EER), ``separation`` (content separator), ``baselines``
(d-vector and x-vector), ``assessment`` (classifiers, search, voting),
``corpus`` (manifests and a synthetic corpus) and ``experiments``
(config-driven runs and reports).
"""

from .audio import CONTENT, SPEAKER, AudioSegment, MelSpectrogram, VADConfig, preprocess, read_wav
from .errors import ContentSepError
from .experiments import Experiment, ExperimentConfig, load_config, run_condition

__version__ = "0.1.0"

__all__ = [
    "CONTENT",
    "SPEAKER",
    "AudioSegment",
    "ContentSepError",
    "Experiment",
    "ExperimentConfig",
    "MelSpectrogram",
    "VADConfig",
    "load_config",
    "preprocess",
    "read_wav",
    "run_condition",
]
