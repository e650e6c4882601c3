import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_tensor(rng, shape, dtype=np.float64, requires_grad=False, scale=1.0):
    from aquafuse.tensor import Tensor

    return Tensor(rng.standard_normal(shape) * scale, requires_grad=requires_grad, dtype=dtype)
