import numpy as np
import pytest

from mlembed.dataset import Dataset, Example, default_synthetic_spec, generate_synthetic


def make_example(ex_id, labels, features=None, dim=4):
    if features is None:
        features = np.zeros(dim)
    return Example(ex_id, np.asarray(features, dtype=np.float64), frozenset(labels))


def make_dataset(label_specs, label_count, dim=4):
    """Tiny hand-built dataset: label_specs is a list of (id, labels)."""
    return Dataset(
        [make_example(ex_id, labels, dim=dim) for ex_id, labels in label_specs],
        label_count,
    )


@pytest.fixture(scope="session")
def default_splits():
    """The desk-scale synthetic dataset used across sampler/trainer tests."""
    return generate_synthetic(default_synthetic_spec())


@pytest.fixture(scope="session")
def default_spec():
    return default_synthetic_spec()
