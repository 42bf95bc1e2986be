import numpy as np
import pytest

from nfcnn.data import save_image
from nfcnn.model import ModelConfig


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_config():
    """Smallest useful two-stage model; dropout off for determinism."""
    return ModelConfig(stages=2, image_channels=1, branch_widths=(4, 4),
                       fusion_width=4, fusion_dropout_elem=0.0,
                       fusion_dropout_chan=0.0)


def smooth_image(rng, height, width, channels=1, block=4):
    """Blocky low-frequency test content in [0, 255]."""
    h = -(-height // block)
    w = -(-width // block)
    base = rng.uniform(0.0, 255.0, (channels, h, w)).astype(np.float32)
    big = np.kron(base, np.ones((1, block, block), np.float32))
    return np.ascontiguousarray(big[:, :height, :width])


@pytest.fixture
def image_dir(tmp_path, rng):
    """Directory of a few small gray PNGs."""
    root = tmp_path / "images"
    root.mkdir()
    for i in range(3):
        save_image(smooth_image(rng, 48, 40), root / f"img{i}.png")
    return root
