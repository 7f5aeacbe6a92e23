"""Shared fixtures and independent numerical oracles.

The gradient oracle here is deliberately independent of the engine's
backward pass: it re-runs the forward closure with each parameter
entry wiggled by +/-h and takes central differences.
"""

import numpy as np
import pytest

from oodkit.data import make_synthetic
from oodkit.engine import Tensor
from oodkit.model import ModelConfig, MultiExitModel, train_model


def finite_difference_gradients(loss_fn, tensors: dict[str, Tensor], h: float = 1e-5):
    """Central-difference d(loss)/d(entry) for every entry of every tensor."""
    grads = {}
    for name, t in tensors.items():
        g = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = loss_fn()
            flat[i] = orig - h
            f_minus = loss_fn()
            flat[i] = orig
            gflat[i] = (f_plus - f_minus) / (2.0 * h)
        grads[name] = g
    return grads


def max_relative_error(analytic: dict, numeric: dict, floor: float = 1e-3) -> float:
    """Worst-case |a-n| / max(floor, |a|, |n|) over all tensors."""
    worst = 0.0
    for name, a in analytic.items():
        n = numeric[name]
        scale = np.maximum(floor, np.maximum(np.abs(a), np.abs(n)))
        worst = max(worst, float(np.max(np.abs(a - n) / scale)))
    return worst


TINY_CONFIG = ModelConfig(
    input_size=16,
    channels=(3, 4, 5),
    exit_blocks=(1, 2),
    exit_channels=4,
    hidden=8,
    n_classes=3,
    seed=11,
)

SMALL_CONFIG = ModelConfig(
    input_size=32,
    channels=(8, 16, 32),
    exit_blocks=(1, 2),
    exit_channels=16,
    hidden=32,
    n_classes=3,
    seed=7,
)


@pytest.fixture
def tiny_model():
    return MultiExitModel(TINY_CONFIG)


@pytest.fixture(scope="session")
def blob_data():
    """60 trivially separable 3-class blob images (20 per class)."""
    return make_synthetic(n_classes=3, per_class=20, size=32, seed=4)


@pytest.fixture(scope="session")
def trained_small_model(blob_data):
    """One 30-epoch training run on the blob set, shared across tests."""
    images, labels = blob_data
    model = MultiExitModel(SMALL_CONFIG)
    history = train_model(
        model,
        images,
        labels,
        epochs=30,
        batch_size=8,
        optimizer="adam",
        learning_rate=1e-3,
        seed=7,
    )
    return model, history
