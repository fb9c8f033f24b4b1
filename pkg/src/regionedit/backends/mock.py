"""Deterministic mock backends.

The mock world is built so every quantity the losses consume has a closed
form: image embeddings are the normalized mean RGB lifted into the first
three axes of the embedding space, and the colour lexicon maps ``red``,
``green`` and ``blue`` to those same orthogonal axes.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import asdict, dataclass

import numpy as np

from ..core import AttentionMap, EmbeddingVector, FeatureMap, ImageBuffer, RegionMask
from .base import Backends, UnsupportedInputError

LEXICON_RGB = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
}

_WORD = re.compile(r"[a-z]+")


def _stable_int(*parts) -> int:
    digest = hashlib.sha256(":".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little")


def color_words(text: str) -> list[str]:
    return [w for w in _WORD.findall(text.lower()) if w in LEXICON_RGB]


@dataclass(frozen=True)
class MockWorld:
    seed: int = 0
    patch_stride: int = 16
    feature_dim: int = 64
    embed_dim: int = 8
    texture_amplitude: float = 0.02
    token_bias: float = 1.0

    def __post_init__(self):
        if self.embed_dim < 3:
            raise ValueError("embed_dim must be >= 3 to hold the colour axes")

    @property
    def checksum(self) -> str:
        payload = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()

    def lexicon(self) -> dict[str, np.ndarray]:
        out = {}
        for word, rgb in LEXICON_RGB.items():
            v = np.zeros(self.embed_dim)
            v[:3] = rgb
            out[word] = v
        return out

    def lift_rgb(self, rgb) -> np.ndarray:
        v = np.zeros(self.embed_dim)
        v[:3] = rgb
        return v

    def hashed_unit(self, text: str, dim: int) -> np.ndarray:
        rng = np.random.default_rng(_stable_int("text", self.seed, dim, text))
        v = rng.standard_normal(dim)
        return v / np.linalg.norm(v)

    def prompt_rgb(self, prompt: str) -> np.ndarray:
        """Fill colour the mock editor paints for ``prompt``."""
        words = color_words(prompt)
        if words:
            rgb = np.sum([LEXICON_RGB[w] for w in words], axis=0)
            return rgb / np.linalg.norm(rgb)
        rng = np.random.default_rng(_stable_int("rgb", self.seed, " ".join(prompt.lower().split())))
        return rng.uniform(0.15, 0.85, size=3)

    def backends(self) -> Backends:
        return Backends(MockFeatureBackend(self), MockScorerBackend(self), MockEditorBackend(self))


def _patch_grid(image: ImageBuffer, stride: int) -> tuple[int, int]:
    return -(-image.height // stride), -(-image.width // stride)


def patch_means(image: ImageBuffer, stride: int) -> np.ndarray:
    """(h, w, 3) mean colour of each stride-sized patch; edge patches may be partial."""
    h, w = _patch_grid(image, stride)
    if image.height % stride == 0 and image.width % stride == 0:
        blocks = image.data.reshape(h, stride, w, stride, 3)
        return blocks.mean(axis=(1, 3))
    out = np.empty((h, w, 3))
    for i in range(h):
        for k in range(w):
            block = image.data[i * stride:(i + 1) * stride, k * stride:(k + 1) * stride]
            out[i, k] = block.reshape(-1, 3).mean(axis=0)
    return out


class MockFeatureBackend:
    """SSL stand-in: per-patch descriptors through a fixed random projection.

    Attention is the mean intensity of each patch, so bright objects attract
    the anchors.
    """

    serial_only = False

    def __init__(self, world: MockWorld):
        self.world = world
        self.identifier = "mock-ssl"
        self.checksum = world.checksum
        self.patch_stride = world.patch_stride
        self.feature_dim = world.feature_dim
        rng = np.random.default_rng(_stable_int("features", world.seed))
        self._projection = rng.standard_normal((world.feature_dim, 8)) / np.sqrt(8)

    def grid_for(self, height: int, width: int) -> tuple[int, int]:
        s = self.patch_stride
        if height % s or width % s or height <= 0 or width <= 0:
            raise UnsupportedInputError(
                f"image {height}x{width} unsupported: height and width must be positive "
                f"multiples of {s} (e.g. {max(s, height - height % s)}x{max(s, width - width % s)})")
        return height // s, width // s

    def extract(self, image: ImageBuffer) -> tuple[FeatureMap, AttentionMap]:
        h, w = self.grid_for(image.height, image.width)
        s = self.patch_stride
        blocks = image.data.reshape(h, s, w, s, 3).transpose(0, 2, 1, 3, 4).reshape(h, w, s * s, 3)
        mean = blocks.mean(axis=2)
        std = blocks.std(axis=2)
        lum = mean.mean(axis=2, keepdims=True)
        desc = np.concatenate([mean, std, lum, np.ones_like(lum)], axis=2)
        features = np.tanh(np.einsum("dk,hwk->dhw", self._projection, desc))
        return FeatureMap(features), AttentionMap(lum[..., 0])


class MockScorerBackend:
    """CLIP stand-in with an orthogonal colour lexicon."""

    serial_only = False

    def __init__(self, world: MockWorld):
        self.world = world
        self.identifier = "mock-clip"
        self.checksum = world.checksum
        self.embed_dim = world.embed_dim
        self._lexicon = world.lexicon()

    def embed_image(self, image: ImageBuffer) -> EmbeddingVector:
        v = self.world.lift_rgb(image.data.reshape(-1, 3).mean(axis=0))
        norm = np.linalg.norm(v)
        if norm < 1e-8:
            return EmbeddingVector(np.zeros(self.embed_dim), degenerate=True)
        return EmbeddingVector(v / norm)

    def embed_text(self, text: str) -> EmbeddingVector:
        words = color_words(text)
        if words:
            v = np.sum([self._lexicon[w] for w in words], axis=0)
            return EmbeddingVector(v / np.linalg.norm(v))
        return EmbeddingVector(self.world.hashed_unit(" ".join(text.lower().split()), self.embed_dim))

    def patch_tokens(self, image: ImageBuffer) -> np.ndarray:
        means = patch_means(image, self.world.patch_stride).reshape(-1, 3)
        bias = np.full((means.shape[0], 1), self.world.token_bias)
        return np.concatenate([means, bias], axis=1)


class MockEditorBackend:
    """Paints the masked region with the prompt colour plus seeded texture."""

    serial_only = False
    kind = "mock-fill"

    def __init__(self, world: MockWorld):
        self.world = world
        self.identifier = "mock-editor"
        self.checksum = world.checksum

    def edit(self, image: ImageBuffer, mask: RegionMask, prompt: str, seed: int) -> ImageBuffer:
        if seed < 0:
            raise ValueError("seed must be non-negative")
        rng = np.random.default_rng([self.world.seed, int(seed)])
        a = self.world.texture_amplitude
        m = mask.data
        noise = rng.uniform(-a, a, size=(int(m.sum()), 3))
        out = np.array(image.data)
        out[m] = np.clip(self.world.prompt_rgb(prompt) + noise, 0.0, 1.0)
        return ImageBuffer(out)
