import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(autouse=True)
def _isolated_cwd(tmp_path, monkeypatch):
    # relative output paths never land in the source tree
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv("PHOTOPHYS_OUT", raising=False)
