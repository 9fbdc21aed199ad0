"""Shared fixtures."""

import os
import sys

import numpy as np
import pytest

# Add the repository root to Python path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from data.synthetic import SyntheticSpec  # noqa: E402
from pipeline.trainer import TrainConfig  # noqa: E402


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: full-size experiment runs")


def pytest_collection_modifyitems(config, items):
    if os.getenv("RAN_RUN_SLOW", "0") == "1":
        return
    skip_slow = pytest.mark.skip(reason="set RAN_RUN_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_spec():
    """A 32x32 synthetic task small enough for unit tests."""
    return SyntheticSpec(image_size=32, num_classes=3, signal_region=1, occluder_prob=0.7,
                         occluder_size_range=(4, 8), noise_level=0.3, num_train=48, num_test=24,
                         seed=0, glyph_size=8)


@pytest.fixture
def small_config():
    return TrainConfig(total_epochs=3, batch_size=16, input_size=16, downsample_size=8, hidden_dim=16,
                       feature_dim=8, lr_decay_epochs=(2,))


@pytest.fixture
def config_file(tmp_path):
    """A run config for CLI tests on the small synthetic task."""
    path = tmp_path / "run.cfg"
    path.write_text(
        "# small synthetic run\n"
        "dataset=synthetic\n"
        "total_epochs=2\n"
        "batch_size=16\n"
        "input_size=16\n"
        "downsample_size=8\n"
        "hidden_dim=8\n"
        "feature_dim=8\n"
        "synth_image_size=32\n"
        "synth_glyph_size=8\n"
        "synth_occluder_size_range=4,8\n"
        "synth_num_train=30\n"
        "synth_num_test=15\n"
    )
    return str(path)
