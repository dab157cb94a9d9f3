import numpy as np
import pytest

from saas.backbone import BackboneConfig, Conditions, SamplerConfig, init_backbone
from saas.layout import build_layout


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_layout():
    return build_layout(4, 2, 6, [(0, 3), (3, 6)])


@pytest.fixture(scope="session")
def small_weights():
    return init_backbone(BackboneConfig(num_layers=4, num_heads=2, model_dim=16, seed=3))


@pytest.fixture(scope="session")
def small_sampler():
    return SamplerConfig(num_steps=6, seed=11)


@pytest.fixture(scope="session")
def small_conditions(small_layout):
    return Conditions.random(small_layout, 32, 5)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.RESULTS:
        terminalreporter.write_line(line)
