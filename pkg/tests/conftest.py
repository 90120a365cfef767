import cv2
import numpy as np
import pytest

from mrir.config import load_config


def make_image(seed: int, size: int = 64, smooth: bool = True) -> np.ndarray:
    """Seeded [size, size, 3] float32 test image with low-frequency content."""
    rng = np.random.default_rng(seed)
    if smooth:
        base = rng.random((max(2, size // 8), max(2, size // 8), 3))
        img = cv2.resize(base, (size, size), interpolation=cv2.INTER_LINEAR)
        img = img + 0.05 * rng.standard_normal((size, size, 3))
    else:
        img = rng.random((size, size, 3))
    return np.clip(img, 0.0, 1.0).astype(np.float32)


MICRO = {
    "conditioning": {
        "d_txt": 8, "d_img": 6, "image_tokens": 5, "vocab_size": 64, "d_hidden": 8,
    },
    "processor": {"widths": [4, 6, 8], "c_f": 8},
    "unet": {
        "scales": 2, "widths": [8, 12], "n_heads": 2, "d_cross": 8,
        "time_dim": 8, "groups": 4,
    },
}


def micro_cfg(**overrides):
    base = {k: dict(v) for k, v in MICRO.items()}
    for key, section in overrides.items():
        base.setdefault(key, {}).update(section)
    return load_config(base)


@pytest.fixture
def image64():
    return make_image(7, 64)
