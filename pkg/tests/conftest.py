import numpy as np
import pytest

from .support.constants import SEED


def pytest_addoption(parser):
    parser.addoption(
        "--runslow",
        action="store_true",
        default=False,
        help="Run acceptance-scale tests marked slow.",
    )


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def default_settings():
    """Every test starts and ends with the default lab settings."""
    from nublado_lyapunov.conf.app_settings import app_settings

    app_settings.configure({})
    yield
    app_settings.configure({})


@pytest.fixture()
def lab_app_settings():
    """The lab settings, reset to their defaults."""
    from nublado_lyapunov.conf.app_settings import app_settings

    app_settings.configure({})
    return app_settings


@pytest.fixture
def override_settings(lab_app_settings):
    def _func(**values):
        lab_app_settings.configure(values)
        return lab_app_settings

    return _func


@pytest.fixture
def rng():
    return np.random.default_rng(SEED)
