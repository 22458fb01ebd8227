import numpy as np
import pytest

from oarseg import backend
from oarseg.grids import Mask


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=["default", "numpy"])
def any_backend(request, monkeypatch):
    """Run a test under the active backend and under the numpy fallback."""
    if request.param == "numpy":
        monkeypatch.setattr(backend, "NUMBA_ENABLED", False)
    return request.param


def random_mask(rng, dims, p=0.3, spacing=(1.0, 1.0, 1.0)) -> Mask:
    return Mask(rng.random(dims) < p, spacing)
