"""Progressive multi-resolution detector and localizer for procedurally forged images."""

from .config import TrainConfig
from .datagen import CorpusSpec, ImageSample, generate_corpus, load_dataset
from .hierarchy import DEFAULT_HIERARCHY, ClassHierarchy
from .model import ForgeryDetector

__all__ = [
    "TrainConfig",
    "CorpusSpec",
    "ImageSample",
    "generate_corpus",
    "load_dataset",
    "DEFAULT_HIERARCHY",
    "ClassHierarchy",
    "ForgeryDetector",
]
