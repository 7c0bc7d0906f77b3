import numpy as np
import pytest


def synthetic_tissue(seed: int, size: int = 64) -> np.ndarray:
    """Stain-like test image: pink stroma with sharp-edged purple nuclei."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    img = np.empty((size, size, 3))
    img[:] = np.array([0.93, 0.75, 0.82]) + 0.04 * np.sin(xx[..., None] / 9 + rng.uniform(0, 6))
    for _ in range(rng.integers(6, 10) * (size // 64) ** 2):
        cy, cx = rng.uniform(4, size - 4, 2)
        r = rng.uniform(3, 8)
        colour = np.array([0.35, 0.2, 0.55]) + rng.uniform(-0.08, 0.08, 3)
        img[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = colour
    return np.clip(img, 0.0, 1.0)


@pytest.fixture
def rng():
    return np.random.default_rng(20240229)


@pytest.fixture
def tissue():
    return synthetic_tissue
