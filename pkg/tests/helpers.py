"""Shared test helpers."""

import numpy as np

from regionedit.core import ImageBuffer

# one pass/fail line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def random_image(rng: np.random.Generator, size: int = 64, blobs: int = 3) -> ImageBuffer:
    """Dark background with a few bright rectangles."""
    img = np.full((size, size, 3), 0.1)
    for _ in range(blobs):
        y0, x0 = rng.integers(0, size - 8, 2)
        h, w = rng.integers(8, size // 2, 2)
        img[y0:y0 + h, x0:x0 + w] = rng.uniform(0.3, 1.0, 3)
    return ImageBuffer(img)
