"""Shared fixtures: small generated datasets and models reused across tests."""

import numpy as np
import pytest

from coopfuse.pipeline import CoopModel, PipelineConfig
from coopfuse.sim import SceneConfig, SensorModel, generate_frames

TEST_SENSOR = SensorModel(azimuth_resolution=np.deg2rad(1.0), rings=6)
TEST_SCENE = SceneConfig()


@pytest.fixture(scope="session")
def small_frames():
    """Four deterministic frames for smoke tests."""
    return generate_frames(TEST_SCENE, TEST_SENSOR, seed=11, n_frames=4)


@pytest.fixture(scope="session")
def untrained_model():
    return CoopModel(PipelineConfig(), seed=0)
