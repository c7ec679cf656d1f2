from __future__ import annotations

import numpy as np
import pytest

from affordkit.tensorio import GroundTruthMask, RasterImage


def make_textured(w: int, h: int, seed: int, channels: int = 3) -> RasterImage:
    """High-contrast deterministic test image: smooth noise + sharp clutter."""
    rng = np.random.default_rng(seed)
    base = rng.integers(30, 220, size=(h, w, 3)).astype(np.float64)
    k = np.ones((3, 3)) / 9.0
    p = np.pad(base, ((1, 1), (1, 1), (0, 0)), mode="edge")
    smooth = sum(
        p[dy : dy + h, dx : dx + w] * k[dy, dx] for dy in range(3) for dx in range(3)
    )
    img = smooth.astype(np.uint8)
    for _ in range(max(6, w * h // 300)):
        sw, sh = rng.integers(2, 6, size=2)
        x = int(rng.integers(0, w - sw))
        y = int(rng.integers(0, h - sh))
        img[y : y + sh, x : x + sw] = rng.integers(0, 256, size=3)
    if channels == 1:
        return RasterImage(RasterImage(img).to_gray().astype(np.uint8))
    return RasterImage(img)


def disc_mask(w: int, h: int, cx: float, cy: float, radius: float, value: int = 255) -> GroundTruthMask:
    yy, xx = np.mgrid[0:h, 0:w]
    m = ((xx - cx) ** 2 + (yy - cy) ** 2 <= radius * radius) * np.uint8(value)
    return GroundTruthMask(m.astype(np.uint8))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
