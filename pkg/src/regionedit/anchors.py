"""Anchor selection from the SSL attention map."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Anchor, AttentionMap

DEFAULT_NUM_ANCHORS = 8


@dataclass(frozen=True)
class AnchorConfig:
    k: int = DEFAULT_NUM_ANCHORS

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")


def select_anchors(attn: AttentionMap, config: AnchorConfig = AnchorConfig()) -> list[Anchor]:
    """Top-k attention cells, highest first; ties go to the lower row-major index."""
    h, w = attn.grid
    if config.k > h * w:
        raise ValueError(f"k={config.k} exceeds the {h}x{w} grid")
    flat = attn.data.reshape(-1)
    order = np.argsort(-flat, kind="stable")[: config.k]
    return [Anchor(int(i // w), int(i % w), float(flat[i])) for i in order]
