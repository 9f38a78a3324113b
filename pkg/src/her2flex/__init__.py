"""Flexible-modality HER2 grading from H&E and IHC patches."""

from .config import RunConfig, default_config
from .data import Direction, Her2Grade, Modality, PairedSample, synth_corpus
from .errors import Her2FlexError
from .fusion import BaselineNet, Her2Net, NetConfig
from .cmgan import DiscriminatorNet, GeneratorNet
from .router import ModalityClassifier

__version__ = "0.1.0"

__all__ = [
    "BaselineNet",
    "Direction",
    "DiscriminatorNet",
    "GeneratorNet",
    "Her2FlexError",
    "Her2Grade",
    "Her2Net",
    "ModalityClassifier",
    "Modality",
    "NetConfig",
    "PairedSample",
    "RunConfig",
    "default_config",
    "synth_corpus",
]
