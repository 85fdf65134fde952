import numpy as np
import pytest

from foodrec.data import merge_datasets, split_dataset
from foodrec.synth import generate_synthetic_dataset


@pytest.fixture(scope="session")
def synth_sets(tmp_path_factory):
    """Small file-backed A/B datasets shared across tests."""
    root = tmp_path_factory.mktemp("synthdata")
    a = generate_synthetic_dataset(root, "A", classes=4, per_class=8,
                                   size_range=(44, 56), seed=0)
    b = generate_synthetic_dataset(root, "B", classes=4, per_class=8,
                                   size_range=(36, 48), seed=1)
    return root, a, b


@pytest.fixture(scope="session")
def split_merged(synth_sets):
    """Merged A+B manifest with an 80/10/10 split assigned."""
    _, a, b = synth_sets
    return split_dataset(merge_datasets(a, b), (0.8, 0.1, 0.1), seed=7)
