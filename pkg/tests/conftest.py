import numpy as np
import pytest

from collab.theory import example_scheme


@pytest.fixture
def worked_scheme():
    """The fixed-point example scheme at a collision width fast to simulate."""
    return example_scheme(delta=0.02)


@pytest.fixture
def rng():
    return np.random.default_rng(20240612)
