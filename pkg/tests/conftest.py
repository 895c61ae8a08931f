import os

import hypothesis
import numpy as np
import pytest

from ballsparse.processing.attention.layer import prepare_layout
from ballsparse.processing.attention.params import BsaConfig
from ballsparse.processing.geom.ball_tree import PointCloud

np.seterr(all="warn")

hypothesis.settings.register_profile("fast", max_examples=10, deadline=None)
hypothesis.settings.register_profile("ci", max_examples=50, deadline=None)
hypothesis.settings.register_profile("debugger", report_multiple_bugs=False, deadline=None)
hypothesis.settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "fast"))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def small_config():
    """m=8, l=2, k=2, g=2 on 2 heads of width 4"""
    return BsaConfig(
        ball_size=8, block_len=2, top_k=2, group_size=2,
        heads=2, head_dim=4, model_dim=8,
    )


@pytest.fixture
def small_layout(rng, small_config):
    points = PointCloud(rng.standard_normal((32, 3)))
    tree, config = prepare_layout(points, small_config)
    return points, tree, config
