from __future__ import annotations

import numpy as np
import pytest

from geolab.model import ModelConfig, ModelState
from geolab.synthscene import SceneSpec, make_sample

SMALL = ModelConfig(image_size=16, patch_size=8, dim=16, heads=2, layers=2, head_layers=5, vocab=16,
                    caption_len=4, mlp_ratio=2, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_config():
    return SMALL


@pytest.fixture
def small_state():
    return ModelState.init(SMALL)


@pytest.fixture(scope="session")
def small_sample():
    """4-frame 16x16 scene matching the small model."""
    return make_sample(SceneSpec(seed=5, image_size=16, n_frames=4), caption_len=SMALL.caption_len, vocab=SMALL.vocab)


@pytest.fixture(scope="session")
def scene_sample():
    """Default 4-frame 32x32 scene."""
    return make_sample(SceneSpec(seed=1))


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
