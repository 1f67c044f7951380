import numpy as np
import pytest

from ensteal.datapool import Dataset, GaussianMixture, make_synthetic, strip_labels
from ensteal.numkit import MlpModel, MlpSpec, SgdConfig, train_supervised


def make_sharp_models(k: int, dim: int, classes: int, seed: int, hidden=(5,)) -> list[MlpModel]:
    """Small random models with scaled-up weights, so their softmax outputs
    are confident enough to exercise thresholds and disagreements."""
    rng = np.random.default_rng(seed)
    models = []
    for i in range(k):
        spec = MlpSpec(dim, hidden, classes, "tanh", rng_seed=int(rng.integers(1 << 32)))
        m = MlpModel.initialize(spec)
        m.params *= float(rng.uniform(4.0, 10.0))
        models.append(m)
    return models


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_mixture() -> Dataset:
    return make_synthetic(GaussianMixture(4, 6, 5.0), 600, seed=11)


@pytest.fixture(scope="session")
def small_pool(small_mixture) -> Dataset:
    return strip_labels(make_synthetic(GaussianMixture(4, 6, 5.0), 400, seed=12))


@pytest.fixture(scope="session")
def trained_small_model(small_mixture) -> MlpModel:
    spec = MlpSpec(6, (16,), 4, "relu", rng_seed=5)
    cfg = SgdConfig(base_lr=0.05, momentum=0.9, epochs=25, batch_size=32)
    model, _ = train_supervised(
        MlpModel.initialize(spec), (small_mixture.features, small_mixture.labels), cfg, 77
    )
    return model
