import os

os.environ.setdefault("BRANCHWAVE_CHECK_INVARIANTS", "1")
os.environ.setdefault("BRANCHWAVE_LOG_LEVEL", "WARNING")

import hypothesis  # noqa: E402
import numpy as np  # noqa: E402
import pytest  # noqa: E402

from app.models.network import NeuralNet  # noqa: E402

np.seterr(all="warn")

hypothesis.settings.register_profile("fast", max_examples=5, deadline=None)
hypothesis.settings.register_profile("ci", max_examples=50, deadline=None)
hypothesis.settings.load_profile(os.getenv("HYPOTHESIS_PROFILE", "fast"))


@pytest.fixture(params=range(3))
def rng(request):
    return np.random.default_rng(request.param)


@pytest.fixture
def random_net():
    """Factory for small dense random networks with the given dimension vector."""

    def make(dims, seed=0):
        gen = np.random.default_rng(seed)
        layers = [(gen.normal(size=(dims[i + 1], dims[i])), gen.normal(size=dims[i + 1])) for i in range(len(dims) - 1)]
        return NeuralNet.from_layers(layers)

    return make


@pytest.fixture
def tmp_out(tmp_path):
    return tmp_path / "out"
