import os

import numpy as np
import pytest

from dpfed import data

REPO_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
MNIST_DIR = os.environ.get("DPFED_DATA_DIR", os.path.join(REPO_ROOT, "data", "mnist"))


@pytest.fixture(scope="session")
def mnist():
    """(train, test) Datasets from the repo's bundled MNIST files."""
    if not os.path.isdir(MNIST_DIR):
        pytest.fail(f"MNIST directory missing: {MNIST_DIR}")
    return data.load_mnist(MNIST_DIR)


@pytest.fixture(scope="session")
def mnist_train(mnist):
    return mnist[0]


@pytest.fixture(scope="session")
def mnist_test(mnist):
    return mnist[1]


def toy_dataset(n=240, dim=8, classes=3, seed=0):
    """Small synthetic dataset with learnable class structure."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, classes, size=n)
    centers = rng.uniform(0.2, 0.8, size=(classes, dim))
    features = np.clip(centers[labels] + rng.normal(0, 0.05, size=(n, dim)), 0, 1)
    return data.Dataset(features=features, labels=labels.astype(np.int64))
