import numpy as np
import pytest

from gramevo import TensorShape, default_grammar


@pytest.fixture(scope="session")
def grammar():
    return default_grammar()


@pytest.fixture(scope="session")
def im_shape():
    return TensorShape.im(3, 32, 32)


def rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))
