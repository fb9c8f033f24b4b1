"""Random-size region baselines used by the ablation harness.

Both draw box height and width uniformly from [0, H] and [0, W] in pixels
and clamp to the image; they differ only in where the centre comes from.
Boxes are snapped outward to the patch grid so they rasterize like every
other proposal. These boxes need not be square.
"""

from __future__ import annotations

import numpy as np

from .anchors import AnchorConfig, select_anchors
from .backends.base import FeatureBackend, extract_features
from .core import Anchor, BoxProposal, ImageBuffer


def random_size_box(center: tuple[float, float], image_hw: tuple[int, int], patch_stride: int,
                    rng: np.random.Generator, anchor: Anchor | None = None,
                    max_tries: int = 1000) -> BoxProposal:
    """Box of uniform random size around ``center`` (pixels), clamped and snapped to patches."""
    height, width = image_hw
    cy, cx = center
    for _ in range(max_tries):
        bh = rng.uniform(0, height)
        bw = rng.uniform(0, width)
        y0 = round(max(cy - bh / 2, 0.0))
        y1 = round(min(cy + bh / 2, height))
        x0 = round(max(cx - bw / 2, 0.0))
        x1 = round(min(cx + bw / 2, width))
        if y1 > y0 and x1 > x0:
            break
    else:
        raise RuntimeError("could not draw a non-empty box")
    rect = (y0 // patch_stride, x0 // patch_stride,
            (y1 - 1) // patch_stride, (x1 - 1) // patch_stride)
    if anchor is None:
        anchor = Anchor(int(cy // patch_stride), int(cx // patch_stride), 0.0)
    return BoxProposal(anchor, 0, rect)


def baseline_random_random(image: ImageBuffer, rng: np.random.Generator,
                           patch_stride: int = 16) -> BoxProposal:
    """Random-anchor-random-size: centre uniform over the whole image.

    The returned box's anchor is the patch containing the drawn centre.
    """
    hw = (image.height, image.width)
    center = (rng.uniform(0, hw[0]), rng.uniform(0, hw[1]))
    return random_size_box(center, hw, patch_stride, rng)


def anchor_random_box(image: ImageBuffer, anchor: Anchor, patch_stride: int,
                      rng: np.random.Generator) -> BoxProposal:
    center = ((anchor.row + 0.5) * patch_stride, (anchor.col + 0.5) * patch_stride)
    return random_size_box(center, (image.height, image.width), patch_stride, rng, anchor)


def baseline_dino_random(image: ImageBuffer, backend: FeatureBackend, rng: np.random.Generator,
                         k: int = 8) -> BoxProposal:
    """DINO-anchor-random-size: a random-size box on one of the top-k attention anchors."""
    _, attention = extract_features(backend, image)
    anchors = select_anchors(attention, AnchorConfig(k))
    anchor = anchors[int(rng.integers(len(anchors)))]
    return anchor_random_box(image, anchor, backend.patch_stride, rng)


def dino_random_boxes(image: ImageBuffer, backend: FeatureBackend, rng: np.random.Generator,
                      k: int = 8) -> list[BoxProposal]:
    """One random-size box per attention anchor, in anchor order."""
    _, attention = extract_features(backend, image)
    return [anchor_random_box(image, a, backend.patch_stride, rng)
            for a in select_anchors(attention, AnchorConfig(k))]
