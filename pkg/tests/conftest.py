import os

import hypothesis
import numpy as np
import pytest

from src.diffusion.approximators import build_mlp_model, build_rbf_model, stationary_model
from tests.helpers import binomial_spec, gaussian_spec, perturbed

np.seterr(all="warn")

hypothesis.settings.register_profile("fast", max_examples=10, deadline=None)
hypothesis.settings.register_profile("ci", max_examples=100, deadline=None)
hypothesis.settings.load_profile(os.getenv("HYPOTHESIS_PROFILE", "fast"))


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run full-size training tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture
def standard_normal_model():
    spec = gaussian_spec(T=10, dim=1)
    return spec, stationary_model(spec)


@pytest.fixture
def small_rbf(rng):
    spec = gaussian_spec(T=5, dim=2, mode="learnable")
    data = rng.standard_normal((64, 2))
    model = perturbed(build_rbf_model(spec, data, rng, hidden=4), rng)
    return spec, model, data


@pytest.fixture
def small_mlp(rng):
    spec = binomial_spec(T=8, dim=4)
    model = perturbed(build_mlp_model(spec, rng, hidden_sizes=(5,)), rng)
    data = (rng.random((32, 4)) < 0.5).astype(float)
    return spec, model, data
