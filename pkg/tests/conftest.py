"""Shared fixtures: seeded data, tiny architectures and synthetic exposure pairs."""

import numpy as np
import pytest

from utils.fusion import synthesize_exposure_pair
from utils.network import ArchConfig


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run desk-scale training tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def make_scene(height, width, seed=0):
    """Smooth RGB scene: a dark-to-bright ramp carrying coloured texture."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    ramp = 0.05 + 0.9 * xx / max(width - 1, 1)
    channels = []
    for c in range(3):
        fy, fx = rng.uniform(0.2, 0.6, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        texture = 0.5 + 0.5 * np.sin(fy * yy + fx * xx + phase)
        channels.append(ramp * (0.6 + 0.4 * texture))
    return np.clip(np.stack(channels, axis=-1), 0.0, 1.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_arch():
    return ArchConfig(kernels=(5, 3, 3, 3, 3), channels=(4, 4, 4, 4, 1), seed=3)


@pytest.fixture
def scene():
    return make_scene(48, 48)


@pytest.fixture
def exposure_pair(scene):
    return synthesize_exposure_pair(scene, -2.0, 2.0, 2.2)


@pytest.fixture(scope="session")
def scene_factory():
    return make_scene
