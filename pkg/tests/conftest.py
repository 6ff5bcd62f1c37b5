import warnings

import numpy as np
import pytest

from puidrec.data import Dataset, generate_synthetic


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_synth():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return generate_synthetic(60, 50, latent_dim=4, confounding_strength=0.4, base_exposure=0.2,
                                  seed=3)


def random_dataset(rng, m=12, n=10, density=0.5, feat=3):
    obs = rng.random((m, n)) < density
    obs[0, 0] = True
    ratings = np.where(obs, rng.integers(1, 6, (m, n)).astype(float), np.nan)
    return Dataset(ratings, obs, user_features=rng.normal(size=(m, feat)),
                   item_features=rng.normal(size=(n, feat)))
