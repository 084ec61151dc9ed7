import numpy as np
import pytest

from featseg.images import write_ppm


def blob_image(rng, size=96):
    """Smooth random multi-blob image in [-1, 1]."""
    yy, xx = np.mgrid[0:size, 0:size]
    img = np.zeros((size, size, 3))
    for _ in range(6):
        cy, cx = rng.uniform(0, size, 2)
        sigma = rng.uniform(size / 16, size / 4)
        img += rng.uniform(-1, 1, 3) * np.exp(
            -((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma * sigma))[:, :, None]
    return np.clip(img, -1, 1).astype(np.float32)


@pytest.fixture(scope="session")
def toy_corpus(tmp_path_factory):
    """16 synthetic 96x96 images on disk."""
    root = tmp_path_factory.mktemp("corpus")
    rng = np.random.default_rng(7)
    for i in range(16):
        write_ppm(root / f"img{i:02d}.ppm", blob_image(rng))
    return root
