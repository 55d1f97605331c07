import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from sparsevox.pc_io import VoxelBlock
from sparsevox.sparse_nn import NetworkConfig, init_weights

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def toy_weights():
    return init_weights(NetworkConfig.toy(), seed=3)


def tiny_model(seed=5):
    """d=4, f=4, L=2 model at a generic point: nonzero biases keep ReLU inputs off the kink at 0."""
    w = init_weights(NetworkConfig(L=2, filters=4, kernel=3, residual_blocks=1, d=4), seed=seed)
    rng = np.random.default_rng(seed)
    for layer in w.layers:
        layer.bias[:] = rng.normal(scale=0.1, size=layer.bias.shape)
    return w


@pytest.fixture(scope="session")
def tiny_weights():
    return tiny_model()


def random_block(rng, d=8, density=None, origin=(0, 0, 0)) -> VoxelBlock:
    density = rng.uniform(0.01, 0.9) if density is None else density
    occ = np.flatnonzero(rng.random(d ** 3) < density)
    if occ.size == 0:
        occ = np.array([int(rng.integers(d ** 3))])
    return VoxelBlock.from_indices(occ, d, origin)
