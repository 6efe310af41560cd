import warnings

import pytest
from hypothesis import HealthCheck, settings

from polarlink.errors import SaturationWarning

settings.register_profile(
    "default", deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture(autouse=True)
def _quiet_saturation():
    # Saturation is an expected operating regime in several scenarios.
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SaturationWarning)
        yield
