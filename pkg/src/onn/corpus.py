"""Synthetic natural-image corpus built from scikit-image's bundled samples.

Any directory of raster images works as a dataset; this one exists so
experiments can run without downloading anything. Each file is a random
square crop (random size, flip and quarter turn) of a sample photograph,
saved as 8-bit PNG in the source's colour mode.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

SOURCES = (
    "astronaut", "brick", "camera", "cat", "cell", "chelsea", "clock", "coffee", "coins",
    "grass", "gravel", "hubble_deep_field", "immunohistochemistry", "moon", "page",
    "retina", "rocket", "text",
)


def _sources() -> list:
    from skimage import data

    return [np.asarray(getattr(data, name)()) for name in SOURCES]


def random_crop(img: np.ndarray, rng: np.random.Generator, min_side: int = 60, max_side: int = 200) -> np.ndarray:
    h, w = img.shape[:2]
    side = int(rng.integers(min_side, min(max_side, h, w) + 1))
    i = int(rng.integers(0, h - side + 1))
    j = int(rng.integers(0, w - side + 1))
    crop = img[i:i + side, j:j + side]
    if rng.random() < 0.5:
        crop = crop[:, ::-1]
    return np.rot90(crop, int(rng.integers(4))).copy()


def build_corpus(out_dir, count: int = 1000, seed: int = 0) -> list:
    """Write ``count`` PNG crops to ``out_dir``; returns the file paths."""
    from PIL import Image

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    images = _sources()
    paths = []
    for k in range(count):
        src = images[int(rng.integers(len(images)))]
        crop = random_crop(src, rng)
        path = out / f"img_{k:04d}.png"
        Image.fromarray(crop).save(path)
        paths.append(path)
    return paths
