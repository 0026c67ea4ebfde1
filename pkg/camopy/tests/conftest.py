"""
CamoPy Test Configuration

Functions:
* rng: random number generator with session level scope
* taxonomy: the bundled attribute taxonomy
* toy_config: the toy preset, shortened for tests
* synth_manifest: a small synthetic data set on disk, shared by the session
"""
import numpy as np
import pytest

from camopy.config import load_config
from camopy.data import load_taxonomy, synth_generate


@pytest.fixture(scope="session")
def rng() -> np.random.Generator:
    """Random number generator that can persist through a pytest session"""
    seed: int = sum(map(ord, "camopy"))
    return np.random.default_rng(seed=seed)


@pytest.fixture(scope="session")
def taxonomy():
    return load_taxonomy()


@pytest.fixture
def toy_config():
    """Toy preset limited to a handful of steps"""
    return load_config("toy").replace(max_steps=4, batch_size=4, progressbar=False)


@pytest.fixture(scope="session")
def synth_manifest(tmp_path_factory):
    """Eight 64 x 64 synthetic samples"""
    out = tmp_path_factory.mktemp("synth")
    return synth_generate(8, seed=3, out_dir=out, canvas=64)
