import numpy as np
import pytest

from maxmargin import nn
from maxmargin.rng import generator


def random_model(seed: int, sizes=None, weight_scale: float = 1.0) -> nn.DenseModel:
    rng = generator(seed, "testmodel")
    if sizes is None:
        depth = int(rng.integers(1, 4))
        sizes = [int(rng.integers(2, 6))]
        sizes += [int(rng.integers(3, 9)) for _ in range(depth - 1)]
        sizes += [int(rng.integers(2, 6))]
    model = nn.init_model(sizes, int(rng.integers(0, 2**31)))
    if weight_scale != 1.0:
        for w, b in model.layers:
            w *= weight_scale
    # Random biases so gradients w.r.t. them are informative.
    for _, b in model.layers:
        b += 0.1 * rng.normal(size=b.shape)
    return model


def flat_grads(param_grads) -> np.ndarray:
    return np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in param_grads])


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(12345))
