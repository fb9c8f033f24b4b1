"""Synthetic scenes for the mock world, with a brute-force loss enumerator.

``grow``: a bright green square on a dark background, prompt "red",
region of interest "green", and patch tokens dominated by a constant
component. Recolouring more of the square always helps, so the largest
proposal is the unique loss minimizer for every anchor.

``shrink``: same scene, but tokens carry mostly colour, so the structure
term dominates and the smallest proposal wins.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backends.base import Backends
from .backends.mock import MockWorld
from .core import ImageBuffer
from .losses import PromptSpec

TOKEN_BIAS = {"grow": 32.0, "shrink": 4.0}


@dataclass
class Scenario:
    name: str
    image: ImageBuffer
    prompt: PromptSpec
    world: MockWorld

    def backends(self) -> Backends:
        return self.world.backends()


def square_scene(size: int = 224, object_patches: int = 6, stride: int = 16) -> ImageBuffer:
    """Dark grey background with a green square whose brightness peaks at the centre."""
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    c = size / 2
    r = np.maximum(np.abs(yy - c), np.abs(xx - c)) / (object_patches * stride / 2)
    img = np.full((size, size, 3), 0.12)
    inside = r <= 1
    img[inside] = np.stack([np.full_like(r, 0.25), 1.0 - 0.3 * r, np.full_like(r, 0.25)], -1)[inside]
    return ImageBuffer(img)


def synthetic_scenario(name: str = "grow", seed: int = 0, size: int = 224) -> Scenario:
    if name not in TOKEN_BIAS:
        raise ValueError(f"unknown scenario {name!r}; choose from {sorted(TOKEN_BIAS)}")
    world = MockWorld(seed=seed, token_bias=TOKEN_BIAS[name])
    return Scenario(name, square_scene(size), PromptSpec("red", "green"), world)


def enumerate_proposal_losses(scenario: Scenario, k: int = 8, m: int = 7, edit_seed: int = 0,
                              scale_step: int = 1) -> np.ndarray:
    """(k, m) composite loss for every anchor/proposal pair, computed independently of training."""
    from .anchors import AnchorConfig, select_anchors
    from .backends.base import edit_image, extract_features
    from .core import rasterize_mask
    from .losses import editing_loss
    from .regions import ProposalConfig, make_proposals

    b = scenario.backends()
    img = scenario.image
    features, attention = extract_features(b.feature, img)
    out = np.empty((k, m))
    for i, anchor in enumerate(select_anchors(attention, AnchorConfig(k))):
        for box in make_proposals(anchor, ProposalConfig(m, scale_step), features.grid):
            mask = rasterize_mask(box, b.feature.patch_stride, img.height, img.width)
            edited = edit_image(b.editor, img, mask, scenario.prompt.prompt, edit_seed)
            out[i, box.size_index - 1] = editing_loss(b.scorer, img, edited, scenario.prompt).total
    return out
