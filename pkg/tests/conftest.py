import numpy as np
import pytest

from voltvar.assets import bundled_case_path, bundled_config_path, bundled_profile_path
from voltvar.cli import load_config
from voltvar.netmodel import load_case


@pytest.fixture(scope="session")
def bundled_case():
    return load_case(bundled_case_path())


@pytest.fixture(scope="session")
def bundled_setup():
    return load_config(bundled_config_path())


@pytest.fixture(scope="session")
def bundled_profile_file():
    return bundled_profile_path()


@pytest.fixture()
def rng():
    return np.random.default_rng(12345)
