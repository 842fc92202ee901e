"""Shared fixtures. The full-length runs are session-scoped so the expensive
50-step trajectories are computed once; treat them as read-only."""

import pytest

from attnreg.objective import RegulationConfig
from attnreg.simulator import SamplerConfig, ToyModel, run_generation


@pytest.fixture(scope="session")
def suite_model():
    """The CLI default model: key bias +3.0 on token 5."""
    return ToyModel.build(seed=0, dominance_bias=((5, 3.0),))


@pytest.fixture(scope="session")
def plain_model():
    return ToyModel.build(seed=3)


@pytest.fixture(scope="session")
def sampler50():
    return SamplerConfig()


@pytest.fixture(scope="session")
def sampler5():
    return SamplerConfig(steps=5)


@pytest.fixture(scope="session")
def default_reg():
    return RegulationConfig(targets=(1, 2))


@pytest.fixture(scope="session")
def baseline_run(suite_model, sampler50):
    """Unregulated 50-step run on the default prompt (5, 9), seed 0."""
    return run_generation(suite_model, (5, 9), sampler50, None, seed=0)


@pytest.fixture(scope="session")
def regulated_run(suite_model, sampler50, default_reg):
    """Default-regulated twin of baseline_run."""
    return run_generation(suite_model, (5, 9), sampler50, default_reg, seed=0)
