import numpy as np
import pytest

from convleak import AccelConfig, ChainConfig, Image, generate_kernels


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def random_image(rng):
    return Image(rng.integers(0, 256, size=(28, 28), dtype=np.uint8))


@pytest.fixture
def kernel():
    return generate_kernels(1, 3, seed=2)[0]


@pytest.fixture
def acfg():
    return AccelConfig()


@pytest.fixture
def ccfg():
    return ChainConfig()
