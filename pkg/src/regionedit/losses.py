"""Composite editing loss (CLIP guidance, structure, direction) and the ranking score."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .backends.base import ScorerBackend, embed_image, embed_text, patch_tokens
from .core import ImageBuffer, cosine_distance, cosine_similarity

DEFAULT_ROI_TEXT = "a photo"
DEFAULT_ALPHA = 2.0
DEFAULT_BETA = 1.0


@dataclass(frozen=True)
class LossWeights:
    clip: float = 1.0
    structural: float = 1.0
    directional: float = 1.0

    def __post_init__(self):
        for name in ("clip", "structural", "directional"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {name} must be finite and >= 0, got {v}")


@dataclass(frozen=True)
class LossBreakdown:
    clip: float
    structural: float
    directional: float
    total: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class PromptSpec:
    prompt: str
    roi_text: str | None = None

    def __post_init__(self):
        if not self.prompt or not self.prompt.strip():
            raise ValueError("prompt must be non-empty")

    @property
    def resolved_roi_text(self) -> str:
        return self.roi_text if self.roi_text else DEFAULT_ROI_TEXT

    @property
    def roi_defaulted(self) -> bool:
        return not self.roi_text


@dataclass(frozen=True)
class QualityScore:
    s_t2i: float
    s_i2i: float
    alpha: float
    beta: float
    s: float
    degenerate: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def clip_loss(scorer: ScorerBackend, edited: ImageBuffer, prompt: PromptSpec) -> float:
    return cosine_distance(embed_image(scorer, edited), embed_text(scorer, prompt.prompt))


def self_similarity(tokens: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarity of the rows of ``tokens``; zero rows give zero rows."""
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim != 2 or tokens.shape[0] < 2:
        raise ValueError(f"need an (n >= 2, dim) token array, got {tokens.shape}")
    norms = np.linalg.norm(tokens, axis=1, keepdims=True)
    unit = np.divide(tokens, norms, out=np.zeros_like(tokens), where=norms >= 1e-8)
    return np.clip(unit @ unit.T, -1.0, 1.0)


def structural_distance(tokens_a: np.ndarray, tokens_b: np.ndarray) -> float:
    if np.shape(tokens_a)[0] != np.shape(tokens_b)[0]:
        raise ValueError(f"token count mismatch: {np.shape(tokens_a)[0]} vs {np.shape(tokens_b)[0]}")
    return float(np.linalg.norm(self_similarity(tokens_a) - self_similarity(tokens_b)))


def structural_loss(scorer: ScorerBackend, edited: ImageBuffer, source: ImageBuffer) -> float:
    return structural_distance(patch_tokens(scorer, edited), patch_tokens(scorer, source))


def directional_loss(scorer: ScorerBackend, source: ImageBuffer, edited: ImageBuffer,
                     prompt: PromptSpec) -> float:
    image_dir = embed_image(scorer, edited).data - embed_image(scorer, source).data
    text_dir = (embed_text(scorer, prompt.prompt).data
                - embed_text(scorer, prompt.resolved_roi_text).data)
    return cosine_distance(image_dir, text_dir)


def composite_loss(weights: LossWeights, parts: tuple[float, float, float]) -> LossBreakdown:
    clip, structural, directional = (float(p) for p in parts)
    total = weights.clip * clip + weights.structural * structural + weights.directional * directional
    return LossBreakdown(clip, structural, directional, total)


def editing_loss(scorer: ScorerBackend, source: ImageBuffer, edited: ImageBuffer,
                 prompt: PromptSpec, weights: LossWeights = LossWeights()) -> LossBreakdown:
    """All three terms for one edited image, weighted into a total."""
    return composite_loss(weights, (
        clip_loss(scorer, edited, prompt),
        structural_loss(scorer, edited, source),
        directional_loss(scorer, source, edited, prompt),
    ))


def combine_score(s_t2i: float, s_i2i: float, alpha: float = DEFAULT_ALPHA,
                  beta: float = DEFAULT_BETA, degenerate: bool = False) -> QualityScore:
    return QualityScore(float(s_t2i), float(s_i2i), float(alpha), float(beta),
                        float(alpha * s_t2i + beta * s_i2i), degenerate)


def quality_score(scorer: ScorerBackend, source: ImageBuffer, edited: ImageBuffer,
                  prompt: PromptSpec, alpha: float = DEFAULT_ALPHA,
                  beta: float = DEFAULT_BETA) -> QualityScore:
    edited_emb = embed_image(scorer, edited)
    t2i = cosine_similarity(embed_text(scorer, prompt.prompt), edited_emb)
    i2i = cosine_similarity(embed_image(scorer, source), edited_emb)
    degenerate = t2i is None or i2i is None
    return combine_score(t2i or 0.0, i2i or 0.0, alpha, beta, degenerate)


class LossContext:
    """Caches everything about (source, prompt) that every candidate edit reuses.

    Produces the same numbers as :func:`editing_loss` and :func:`quality_score`.
    """

    def __init__(self, scorer: ScorerBackend, source: ImageBuffer, prompt: PromptSpec,
                 weights: LossWeights = LossWeights(), alpha: float = DEFAULT_ALPHA,
                 beta: float = DEFAULT_BETA):
        self.scorer = scorer
        self.source = source
        self.prompt = prompt
        self.weights = weights
        self.alpha = alpha
        self.beta = beta
        self.source_embedding = embed_image(scorer, source)
        self.text_embedding = embed_text(scorer, prompt.prompt)
        self.text_direction = (self.text_embedding.data
                               - embed_text(scorer, prompt.resolved_roi_text).data)
        self.source_tokens = patch_tokens(scorer, source)
        self._source_q = self_similarity(self.source_tokens)

    def breakdown(self, edited: ImageBuffer) -> LossBreakdown:
        edited_emb = embed_image(self.scorer, edited)
        tokens = patch_tokens(self.scorer, edited)
        if tokens.shape[0] != self.source_tokens.shape[0]:
            raise ValueError(
                f"token count mismatch: {tokens.shape[0]} vs {self.source_tokens.shape[0]}")
        return composite_loss(self.weights, (
            cosine_distance(edited_emb, self.text_embedding),
            float(np.linalg.norm(self_similarity(tokens) - self._source_q)),
            cosine_distance(edited_emb.data - self.source_embedding.data, self.text_direction),
        ))

    def quality(self, edited: ImageBuffer) -> QualityScore:
        edited_emb = embed_image(self.scorer, edited)
        t2i = cosine_similarity(self.text_embedding, edited_emb)
        i2i = cosine_similarity(self.source_embedding, edited_emb)
        return combine_score(t2i or 0.0, i2i or 0.0, self.alpha, self.beta,
                             t2i is None or i2i is None)
