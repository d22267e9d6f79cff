import numpy as np
import pytest

from qprobe.model import Raster, save_raster


def textured_raster(h=256, w=320, seed=0, flat_cols=120):
    """Gray raster: flat band on the left, oscillating texture elsewhere."""
    rng = np.random.default_rng(seed)
    y, x = np.mgrid[0:h, 0:w]
    img = 0.5 + 0.3 * np.sin(x / (3 + seed % 5)) * np.cos(y / 7) + 0.05 * rng.standard_normal((h, w))
    img[:, :flat_cols] = 0.4
    return Raster.clipped(img)


@pytest.fixture
def source_dir(tmp_path):
    d = tmp_path / "sources"
    d.mkdir()
    for i in range(20):
        save_raster(textured_raster(seed=i), d / f"img{i:02d}.png")
    return d
