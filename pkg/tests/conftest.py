import dataclasses

import pytest

from amproto.data import SyntheticSpec
from amproto.experiments import toy_config, train_test
from amproto.trainer import fit


@pytest.fixture(scope="session")
def toy_data():
    return train_test(SyntheticSpec(samples_per_class=20, seed=0))


@pytest.fixture(scope="session")
def toy_model(toy_data):
    train, _ = toy_data
    cfg = dataclasses.replace(toy_config(0, epochs=8))
    state, reports = fit(train, cfg)
    return state, reports, cfg
