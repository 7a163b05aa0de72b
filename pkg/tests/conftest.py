import numpy as np
import pytest

from pcdnet.tensor import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def leaf(arr, dtype=np.float64):
    """Trainable f64 tensor from an array-like."""
    return Tensor(np.asarray(arr, dtype=dtype), requires_grad=True, dtype=dtype)
