import numpy as np
import pytest

from chromaflow.classifier import ClassifierWeights, TrainConfig, save_weights, train
from chromaflow.data import save_cifar10_bin, stack
from chromaflow.synthetic import make_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def weights64():
    return ClassifierWeights.initialize(seed=7).astype(np.float64)


@pytest.fixture(scope="session")
def demo_data():
    return make_dataset(60, seed=3, prefix="demo")


@pytest.fixture(scope="session")
def trained(tmp_path_factory):
    """A few epochs on synthetic images: accurate enough for directional checks."""
    root = tmp_path_factory.mktemp("trained")
    train_set = make_dataset(500, seed=11, prefix="tr")
    test_set = make_dataset(120, seed=12, prefix="te")
    x, y = stack(train_set)
    result = train(x, y, TrainConfig(epochs=6, learning_rate=0.02, seed=0))
    save_weights(result.weights, root / "w.cwgt")
    save_cifar10_bin(train_set, root / "train.bin")
    save_cifar10_bin(test_set, root / "test.bin")
    return {"weights": result.weights, "dir": root, "test": test_set}
