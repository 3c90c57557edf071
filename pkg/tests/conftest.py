import numpy as np
import pytest

from xraycot import CONCEPT_ORDER, GenConfig, generate_dataset
from xraycot.encoder import RegionStatsEncoder


@pytest.fixture(scope="session")
def region_encoder():
    return RegionStatsEncoder()


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Noise-free 40/20/30 dataset shared by pipeline-level tests."""
    config = GenConfig(
        n_per_split={"train": 40, "calib": 20, "test": 30},
        seed=13,
        noise_sigma=0.0,
        concept_prior=0.25,
    )
    out = tmp_path_factory.mktemp("tiny_dataset")
    manifest = generate_dataset(config, out)
    splits = {name: [s for s in manifest.samples if s.split == name]
              for name in ("train", "calib", "test")}
    return manifest, splits


def labels_for(samples):
    return np.array(
        [[c in s.gold_concepts for c in CONCEPT_ORDER] for s in samples],
        dtype=np.float64,
    )
