import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from chromaflow import autodiff as ad
from chromaflow.classifier import (
    LAYOUT,
    ClassifierWeights,
    TrainConfig,
    forward,
    load_weights,
    predict,
    save_weights,
    train,
)
from chromaflow.data import stack
from chromaflow.errors import ConfigError, DataError, FormatError, ShapeError
from chromaflow.gradcheck import check_gradient
from chromaflow.synthetic import make_dataset


def test_output_shapes(weights64, rng):
    img = rng.random((32, 32, 3))
    assert forward(weights64, img).shape == (10,)
    assert forward(weights64, rng.random((3, 32, 32, 3))).shape == (3, 10)
    assert predict(weights64, rng.random((5, 32, 32, 3))).shape == (5,)
    assert np.ndim(predict(weights64, img)) == 0


@pytest.mark.parametrize("shape", [(32, 32), (31, 32, 3), (32, 32, 4), (1, 2, 32, 32, 3)])
def test_bad_input_shape(weights64, shape):
    with pytest.raises(ShapeError):
        forward(weights64, np.zeros(shape))


def test_batch_matches_single(weights64, rng):
    x = rng.random((4, 32, 32, 3))
    batch = forward(weights64, x).data
    for i in range(4):
        np.testing.assert_allclose(forward(weights64, x[i]).data, batch[i], rtol=1e-12, atol=1e-12)


def test_flatten_order_is_channel_major(weights64, rng):
    """fc.weight columns index (channel, row, col) of the last 128x4x4 feature map."""
    x = rng.random((32, 32, 3))
    base = forward(weights64, x).data
    w = weights64.copy()
    w.tensors["fc.weight"] = np.zeros_like(w.tensors["fc.weight"])
    w.tensors["fc.weight"][0, 5 * 16 + 2 * 4 + 3] = 1.0
    w.tensors["fc.bias"] = np.zeros(10)
    feat = forward(w, x).data[0]
    # recompute the feature by hand from the conv stack
    t = ad.Tensor(x[None])
    for block in ("conv1", "conv2", "conv3"):
        k = weights64.tensors[f"{block}.weight"]
        b = weights64.tensors[f"{block}.bias"]
        t = ad.maxpool2(ad.relu(ad.conv2d(t, ad.Tensor(k), ad.Tensor(b), padding=1, channels_last=True)), True)
    assert feat == pytest.approx(t.data[0, 2, 3, 5], rel=1e-12)
    assert base.shape == (10,)


def test_input_gradient(weights64, rng):
    x = rng.random((32, 32, 3))
    idx = rng.choice(x.size, 40, replace=False)
    res = check_gradient(lambda t: ad.softmax_cross_entropy(forward(weights64, t), 3), x, indices=idx)
    assert res.checked >= 10
    assert res.max_rel_err < 1e-6


def test_float32_weights_compute_in_float32(rng):
    w = ClassifierWeights.initialize(0)
    assert w.dtype == np.float32
    assert forward(w, rng.random((32, 32, 3))).dtype == np.float32


def test_initialize_deterministic():
    assert ClassifierWeights.initialize(5).equals(ClassifierWeights.initialize(5))
    assert not ClassifierWeights.initialize(5).equals(ClassifierWeights.initialize(6))


def test_weights_validation():
    tensors = {k: np.zeros(v) for k, v in LAYOUT.items()}
    tensors["fc.weight"] = np.zeros((10, 100))
    with pytest.raises(ShapeError):
        ClassifierWeights(tensors)
    tensors.pop("fc.weight")
    with pytest.raises(ShapeError):
        ClassifierWeights(tensors)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_weight_file_round_trip(tmp_path_factory, seed):
    path = tmp_path_factory.mktemp("w") / "w.cwgt"
    w = ClassifierWeights.initialize(seed)
    save_weights(w, path)
    assert load_weights(path).equals(w)


def test_weight_file_errors(tmp_path):
    path = tmp_path / "w.cwgt"
    save_weights(ClassifierWeights.initialize(0), path)
    raw = path.read_bytes()
    for bad in (b"XWGT" + raw[4:], raw[:4] + b"\x02\0\0\0" + raw[8:], raw[:-4], raw + b"\0"):
        path.write_bytes(bad)
        with pytest.raises(FormatError):
            load_weights(path)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(adversarial="cw")
    with pytest.raises(ConfigError):
        TrainConfig(epsilon=2.0)
    assert TrainConfig(epsilon=8 / 255).epsilon == pytest.approx(0.031373, abs=1e-6)


def test_train_rejects_bad_data():
    with pytest.raises(DataError):
        train(np.zeros((0, 32, 32, 3)), np.zeros(0), TrainConfig(epochs=1))
    with pytest.raises(DataError):
        train(np.zeros((2, 32, 32, 3)), np.array([0, 10]), TrainConfig(epochs=1))


def test_training_learns_and_is_reproducible():
    data = make_dataset(200, seed=1)
    x, y = stack(data)
    cfg = TrainConfig(epochs=3, learning_rate=0.02, seed=4)
    a = train(x, y, cfg, test=(x, y))
    b = train(x, y, cfg)
    assert a.weights.equals(b.weights)
    assert [r["epoch"] for r in a.history] == [1, 2, 3]
    assert a.history[-1]["train_loss"] < a.history[0]["train_loss"]
    assert a.history[-1]["test_acc"] > 0.2


@pytest.mark.parametrize("mode", ["fgsm", "pgd"])
def test_adversarial_training_runs(mode):
    x, y = stack(make_dataset(64, seed=2))
    result = train(x, y, TrainConfig(epochs=1, adversarial=mode, pgd_steps=2, seed=0))
    assert len(result.history) == 1
    assert np.isfinite(result.history[0]["train_loss"])
