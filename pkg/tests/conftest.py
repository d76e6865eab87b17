import numpy as np
import pytest

from malrobust.nn import MlpClassifier


def linear_binary_model(direction, bias=(0.0, 0.0)):
    """Single-layer 2-class model whose input loss-gradient for y=1 is a
    positive multiple of `direction` everywhere (logit margin z0 - z1
    equals x . direction + bias margin)."""
    d = np.asarray(direction, dtype=float)
    W = np.stack([d / 2.0, -d / 2.0], axis=1)  # (dim, 2)
    b = np.asarray(bias, dtype=float)
    return MlpClassifier([W], [b])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
