import numpy as np
import pytest

from msfa.model import MsfaParams, StudyDataset, omega_mask
from msfa.simulation import simulate_dataset


def random_params(rng, P, K, J, psi_range=(0.3, 1.0), scale=0.8):
    """Masked random parameters; ``J`` is a sequence of specific dims."""
    phi = rng.normal(0, scale, (P, K)) * omega_mask(P, K, 0)
    lams = []
    for j in J:
        m = omega_mask(P, K, j)[:, K:]
        lams.append(rng.normal(0, scale, (P, j)) * m)
    psi = [rng.uniform(*psi_range, P) for _ in J]
    return MsfaParams(phi, tuple(lams), tuple(psi))


def random_dataset(rng, params, n):
    data, _ = simulate_dataset(params, n, seed=int(rng.integers(2**31)))
    return data


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def small_problem():
    """Two studies, P=8, K=1, J=(1, 2) with data drawn from the model."""
    rng = np.random.default_rng(7)
    params = random_params(rng, 8, 1, (1, 2))
    data = random_dataset(rng, params, (300, 250))
    return params, data


@pytest.fixture
def toy_dataset():
    rng = np.random.default_rng(3)
    return StudyDataset.from_arrays([rng.normal(size=(30, 5)), rng.normal(size=(40, 5))])


@pytest.fixture
def interior_problem():
    """Well-conditioned instance whose MLE stays away from the psi floor."""
    rng = np.random.default_rng(21)
    params = random_params(rng, 10, 1, (1, 2), psi_range=(0.3, 1.0), scale=1.0)
    data = random_dataset(rng, params, (800, 600))
    return params, data
