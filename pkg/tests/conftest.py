import pytest

from revmark.model import TrainHyper, gen_dataset, train
from revmark.scheme import SchemeParams


@pytest.fixture(scope="session")
def params():
    return SchemeParams()


@pytest.fixture(scope="session")
def small_params():
    return SchemeParams(n_triggers=16)


@pytest.fixture(scope="session")
def dataset(params):
    """Main experiment dataset: 10 classes x 400 samples, 16x16."""
    return gen_dataset(7, 400, params)


@pytest.fixture(scope="session")
def small_dataset(small_params):
    return gen_dataset(7, 50, small_params)


@pytest.fixture(scope="session")
def base_model(dataset, params):
    return train(dataset, TrainHyper(seed=3), params.n_classes)
