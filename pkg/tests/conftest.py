import numpy as np
import pytest
from hypothesis import settings

from udaqa.data import SyntheticSpec, generate_synthetic, load_dataset

settings.register_profile("repo", derandomize=True, deadline=None, max_examples=60)
settings.load_profile("repo")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """120 samples at the default widths; enough for fast integration tests."""
    dest = tmp_path_factory.mktemp("data") / "small"
    generate_synthetic(SyntheticSpec(n_samples=120, seed=3), dest)
    return load_dataset(dest)
