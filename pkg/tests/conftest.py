import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from forgeloc.config import TrainConfig
from forgeloc.datagen import CorpusSpec, METHOD_TAGS, generate_corpus


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """8 samples (one per tag) at 32x32 for fast I/O-level tests."""
    root = tmp_path_factory.mktemp("tiny_corpus")
    spec = CorpusSpec(counts={t: 1 for t in METHOD_TAGS}, image_size=32, seed=11,
                      output_root=root)
    manifest = generate_corpus(spec)
    return root, manifest


@pytest.fixture(scope="session")
def overfit_corpus(tmp_path_factory):
    """The 64-sample 64x64 corpus (8 per tag) used by the training experiments."""
    root = tmp_path_factory.mktemp("overfit_corpus")
    spec = CorpusSpec(counts={t: 8 for t in METHOD_TAGS}, image_size=64, seed=7,
                      output_root=root)
    generate_corpus(spec)
    return root


def overfit_config(**overrides) -> TrainConfig:
    base = dict(image_size=64, base_width=16, scale_step=2, batch_size=8,
                epochs=40, seed=5, deterministic=True, augment=True,
                checkpoint_every=20)
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def overfit_run(overfit_corpus, tmp_path_factory):
    """Shared deterministic overfit training run (the desk-scale experiment)."""
    from forgeloc.engine import train

    out = tmp_path_factory.mktemp("overfit_run")
    result = train(overfit_config(), overfit_corpus, out)
    return result


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
