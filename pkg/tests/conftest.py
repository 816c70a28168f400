import numpy as np
import pytest

from stitchkit.anchors import AnchorConfig, build_family
from stitchkit.controller import prepare
from stitchkit.data import MarkovTask


TOY_CONFIGS = [AnchorConfig(2, 16, 2, 2.0, num_classes=4, seq_len=6),
               AnchorConfig(4, 32, 2, 2.0, num_classes=4, seq_len=6)]


def randomize(family, seed=0, scale=0.3):
    """Give frozen anchors non-trivial weights without training them."""
    rng = np.random.default_rng(seed)
    for a in family:
        for p in a.parameters().values():
            p.data = p.data + scale * rng.standard_normal(p.shape)
        a.freeze()
    return family


@pytest.fixture
def toy_task():
    return MarkovTask(num_classes=4, seq_len=6, sharpness=2.0, seed=3)


@pytest.fixture
def toy_data(toy_task):
    return toy_task.sample(96, seed=1)


@pytest.fixture
def toy_family():
    return randomize(build_family(TOY_CONFIGS, seed=0))


@pytest.fixture
def toy_palette(toy_family, toy_data):
    palette, overlay = prepare(toy_family, toy_data, kernel=2, stride=1, ranks=[4, 2],
                               calib_batches=3, batch_size=32, seed=0)
    return palette, overlay
