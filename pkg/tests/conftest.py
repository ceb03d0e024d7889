"""Pytest configuration for SAMIRO lab tests."""

import logging
import os
import sys
from unittest.mock import patch

import numpy as np
import pytest

# Add parent directory to path for imports
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from config import LabConfig  # noqa: E402
from launcher import ColoredFormatter  # noqa: E402
from samiro.synth import generate_dataset, write_dataset  # noqa: E402
from samiro.tensor import precision  # noqa: E402

# Small enough for a full train step in milliseconds, large enough for two encoder stages
TINY_CONFIG = """
[data]
height = 32
width = 64
train_count = 8
test_count = 4
lanes_min = 2
lanes_max = 3

[model]
target_widths = 4,8
oracle_widths = 4,8
head_hidden = 4
attention_kernel = 3

[loss]
lambda = 0.1
stage_set = 1,2

[train]
steps = 6
pretrain_steps = 4
batch_size = 2
patch_size = 8
mim_images = 8
seeds = 0,1
log_every = 1
"""


@pytest.fixture
def mock_env(tmp_path):
    """Mock environment variables for testing."""
    with patch.dict(
        "os.environ",
        {
            "SAMIRO_LOG_LEVEL": "quiet",
            "SAMIRO_LOG_DIR": str(tmp_path / "logs"),
            "SAMIRO_NO_TIMESTAMP": "1",
        },
    ):
        yield


@pytest.fixture
def tiny_config_text():
    return TINY_CONFIG


@pytest.fixture
def tiny_config():
    return LabConfig.from_text(TINY_CONFIG, source="tiny.cfg")


@pytest.fixture
def tiny_config_file(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY_CONFIG, encoding="utf-8")
    return path


@pytest.fixture
def tiny_scenes(tiny_config):
    return generate_dataset(tiny_config.data, tiny_config.data.train_count, tiny_config.data.seed)


@pytest.fixture
def tiny_dataset_dir(tmp_path, tiny_scenes):
    return write_dataset(tiny_scenes, tmp_path / "data")


@pytest.fixture
def float64():
    """Run the test body with 64-bit tensors."""
    with precision("float64"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _reset_category_loggers():
    """Drop the file and console handlers a command test may have attached."""
    yield
    root = logging.getLogger()
    for handler in list(root.handlers):
        if isinstance(handler.formatter, ColoredFormatter):
            root.removeHandler(handler)
    for name in ("lab", "training", "data", "metrics", "errors"):
        logger = logging.getLogger(name)
        for handler in list(logger.handlers):
            logger.removeHandler(handler)
            handler.close()
