"""Mask-free local image editing by learning where to edit.

An attention map picks anchor patches, a small network scores square box
proposals around each anchor, a frozen mask-based editor fills the chosen
box, and the candidates are ranked by a text/image similarity score.
"""

from .anchors import AnchorConfig, select_anchors
from .core import (
    Anchor,
    AttentionMap,
    BoxProposal,
    EmbeddingVector,
    FeatureMap,
    ImageBuffer,
    RegionMask,
    cosine_distance,
    cosine_similarity,
    derive_seed,
    mask_pixel_bounds,
    rasterize_mask,
)
from .losses import LossBreakdown, LossWeights, PromptSpec, QualityScore, editing_loss, quality_score
from .regions import ProposalConfig, RegionGenerator, make_proposals, roi_pool, sample_gumbel_selection
from .trainer import EditCandidate, TrainConfig, infer_best_edit, train_region_generator

__version__ = "0.1.0"

__all__ = [
    "Anchor",
    "AnchorConfig",
    "AttentionMap",
    "BoxProposal",
    "EditCandidate",
    "EmbeddingVector",
    "FeatureMap",
    "ImageBuffer",
    "LossBreakdown",
    "LossWeights",
    "PromptSpec",
    "ProposalConfig",
    "QualityScore",
    "RegionGenerator",
    "RegionMask",
    "TrainConfig",
    "cosine_distance",
    "cosine_similarity",
    "derive_seed",
    "editing_loss",
    "infer_best_edit",
    "make_proposals",
    "mask_pixel_bounds",
    "quality_score",
    "rasterize_mask",
    "roi_pool",
    "sample_gumbel_selection",
    "select_anchors",
    "train_region_generator",
]
