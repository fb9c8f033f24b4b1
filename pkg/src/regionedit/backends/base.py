"""Backend roles: SSL feature extractor, text-image scorer and mask-based editor."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, runtime_checkable

import numpy as np

from ..core import AttentionMap, EmbeddingVector, FeatureMap, ImageBuffer, RegionMask


class BackendError(RuntimeError):
    """A backend call failed. ``retryable`` tells the caller whether to try again."""

    def __init__(self, message: str, retryable: bool = False):
        super().__init__(message)
        self.retryable = retryable


class UnsupportedInputError(ValueError):
    pass


@runtime_checkable
class FeatureBackend(Protocol):
    identifier: str
    patch_stride: int
    feature_dim: int
    serial_only: bool

    def grid_for(self, height: int, width: int) -> tuple[int, int]: ...

    def extract(self, image: ImageBuffer) -> tuple[FeatureMap, AttentionMap]: ...


@runtime_checkable
class ScorerBackend(Protocol):
    identifier: str
    embed_dim: int
    serial_only: bool

    def embed_image(self, image: ImageBuffer) -> EmbeddingVector: ...

    def embed_text(self, text: str) -> EmbeddingVector: ...

    def patch_tokens(self, image: ImageBuffer) -> np.ndarray: ...


@runtime_checkable
class EditorBackend(Protocol):
    identifier: str
    kind: str
    serial_only: bool

    def edit(self, image: ImageBuffer, mask: RegionMask, prompt: str,
             seed: int) -> ImageBuffer: ...


@dataclass
class Backends:
    feature: FeatureBackend
    scorer: ScorerBackend
    editor: EditorBackend

    @property
    def serial_only(self) -> bool:
        return bool(self.feature.serial_only or self.scorer.serial_only
                    or self.editor.serial_only)

    def capabilities(self) -> dict:
        """Capability descriptor in the published adapter-contract schema."""
        return {
            "patch_stride": int(self.feature.patch_stride),
            "feature_dim": int(self.feature.feature_dim),
            "embed_dim": int(self.scorer.embed_dim),
            "serial_only": self.serial_only,
        }

    def identifiers(self) -> dict:
        out = {}
        for role in ("feature", "scorer", "editor"):
            backend = getattr(self, role)
            out[role] = {
                "id": backend.identifier,
                "checksum": getattr(backend, "checksum", None),
            }
        return out


def extract_features(backend: FeatureBackend,
                     image: ImageBuffer) -> tuple[FeatureMap, AttentionMap]:
    features, attention = backend.extract(image)
    if features.grid != attention.grid:
        raise BackendError(
            f"{backend.identifier}: feature grid {features.grid} != attention grid "
            f"{attention.grid}")
    if features.channels != backend.feature_dim:
        raise BackendError(
            f"{backend.identifier}: got {features.channels} channels, "
            f"descriptor says {backend.feature_dim}")
    return features, attention


def embed_image(backend: ScorerBackend, image: ImageBuffer) -> EmbeddingVector:
    return backend.embed_image(image)


def embed_text(backend: ScorerBackend, text: str) -> EmbeddingVector:
    if not text or not text.strip():
        raise ValueError("text must be non-empty")
    return backend.embed_text(text)


def patch_tokens(backend: ScorerBackend, image: ImageBuffer) -> np.ndarray:
    tokens = np.asarray(backend.patch_tokens(image), dtype=np.float64)
    if tokens.ndim != 2 or tokens.shape[0] < 2:
        raise BackendError(f"{backend.identifier}: need >= 2 patch tokens, got {tokens.shape}")
    return tokens


def edit_image(backend: EditorBackend, image: ImageBuffer, mask: RegionMask, prompt: str,
               seed: int) -> ImageBuffer:
    if (mask.height, mask.width) != (image.height, image.width):
        raise ValueError(
            f"mask {mask.height}x{mask.width} does not match image "
            f"{image.height}x{image.width}")
    if mask.count() == 0:
        raise ValueError("mask is empty")
    return backend.edit(image, mask, prompt, seed)
