import numpy as np
import pytest

from edgeunlearn import nn_model
from edgeunlearn.nn_model import Layer, Model


def small_mlp(sizes=(16, 8, 5), seed=0) -> Model:
    """dense/relu stack with random (not He) weights and nonzero biases."""
    rng = np.random.default_rng(seed)
    layers = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        w = (rng.standard_normal((a, b)) * 0.5).astype(np.float32)
        bias = (rng.standard_normal(b) * 0.1).astype(np.float32)
        layers.append(Layer("dense", (a, b), [w, bias]))
        if i < len(sizes) - 2:
            layers.append(Layer("relu"))
    layers.append(Layer("softmax_head", (sizes[-1],)))
    return Model(layers, (sizes[0],))


def small_cnn(seed=0) -> Model:
    m = nn_model.tiny_cnn((2, 8, 8), classes=3, channels=(3, 4), hidden=6, seed=seed)
    rng = np.random.default_rng(seed + 100)
    for layer in m.layers:
        if layer.has_params:
            layer.params[1][...] = (rng.standard_normal(layer.params[1].shape) * 0.1).astype(np.float32)
    return m


def batch_for(model: Model, n, seed=1):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, *model.input_shape)).astype(np.float32)
    y = rng.integers(0, model.num_classes, n)
    return x, y


@pytest.fixture
def mlp3():
    return small_mlp((16, 12, 8, 5), seed=3)


@pytest.fixture
def cnn():
    return small_cnn(seed=4)
