import sys
from pathlib import Path

import pytest
import torch

from pairmae.corpus import SynthSpec, generate_synthetic

sys.path.insert(0, str(Path(__file__).parent))

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """Small shared corpus: 8 videos x 8 frames + 8 images, 4 classes."""
    root = tmp_path_factory.mktemp("tiny_corpus")
    spec = SynthSpec(num_videos=8, num_images=8, frames_per_video=8, seed=11)
    manifest = generate_synthetic(spec, root)
    return manifest


@pytest.fixture(scope="session")
def probe_corpora(tmp_path_factory):
    """Train/val corpora for evaluation tests (disjoint seeds)."""
    root = tmp_path_factory.mktemp("probe_corpora")
    train = generate_synthetic(
        SynthSpec(num_videos=24, num_images=24, frames_per_video=8, seed=21),
        root / "train",
    )
    val = generate_synthetic(
        SynthSpec(num_videos=16, num_images=16, frames_per_video=8, seed=22),
        root / "val",
    )
    return train, val
