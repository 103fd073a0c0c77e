import numpy as np
import pytest

from distillation.local_iter import random_local_model
from distillation.source_model import OracleSpec, build_oracle_source


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def truth_n3():
    return random_local_model(3, 2, 1, np.random.default_rng(7))


@pytest.fixture
def oracle_n3(truth_n3):
    return build_oracle_source(OracleSpec(truth_n3))
