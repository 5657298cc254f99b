import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from snk.data import Dataset
from snk.models import FeedforwardAutoencoder, QuadraticProblem
from snk.numerics import SeededRng

settings.register_profile("snk", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("snk")


@pytest.fixture
def rng():
    return SeededRng(1234)


@pytest.fixture
def small_ae():
    """Tiny tanh autoencoder with a fixed random dataset."""
    r = SeededRng(5)
    model = FeedforwardAutoencoder([5, 3, 5], "tanh")
    x = r.normal((12, 5))
    return model, Dataset(x, x.copy()), r.normal(model.dim) * 0.5


@pytest.fixture
def quad():
    return QuadraticProblem(
        [6.0, 3.0, 1.0, 0.5, 0.2], sigma_h=0.2, grad_noise=0.3, w_star=np.arange(5) * 0.1, n_train=60, n_test=20, seed=3
    )
