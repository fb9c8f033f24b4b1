"""Domain types, box geometry and mask rasterization shared across the package."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEGENERATE_NORM = 1e-8
DEGENERATE_DISTANCE = 1.0


def _frozen(array: np.ndarray, dtype=np.float64) -> np.ndarray:
    out = np.array(array, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class ImageBuffer:
    """An RGB image of floats in [0, 1], stored row-major as (H, W, 3)."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or data.shape[2] != 3:
            raise ValueError(f"expected an (H, W, 3) array, got shape {data.shape}")
        if data.shape[0] == 0 or data.shape[1] == 0:
            raise ValueError("image must be non-empty")
        if not np.all(np.isfinite(data)):
            raise ValueError("image contains non-finite values")
        if data.min() < 0.0 or data.max() > 1.0:
            raise ValueError("image values must lie in [0, 1]")
        object.__setattr__(self, "data", _frozen(data))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return 3

    @classmethod
    def filled(cls, height: int, width: int, rgb) -> "ImageBuffer":
        data = np.empty((height, width, 3))
        data[...] = np.asarray(rgb, dtype=np.float64)
        return cls(data)

    @classmethod
    def from_uint8(cls, array: np.ndarray) -> "ImageBuffer":
        return cls(np.asarray(array, dtype=np.float64) / 255.0)

    def to_uint8(self) -> np.ndarray:
        # round half up
        return np.floor(self.data * 255.0 + 0.5).astype(np.uint8)

    def __eq__(self, other):
        if not isinstance(other, ImageBuffer):
            return NotImplemented
        return self.data.shape == other.data.shape and np.array_equal(self.data, other.data)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """SSL backbone features with shape (d, h, w)."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) <= 0:
            raise ValueError(f"expected a non-empty (d, h, w) array, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("feature map contains non-finite values")
        object.__setattr__(self, "data", _frozen(data))

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def grid(self) -> tuple[int, int]:
        return self.data.shape[1], self.data.shape[2]


@dataclass(frozen=True, eq=False)
class AttentionMap:
    """Non-negative [CLS]-query attention over the patch grid, shape (h, w)."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2 or min(data.shape) <= 0:
            raise ValueError(f"expected a non-empty (h, w) array, got {data.shape}")
        if not np.all(np.isfinite(data)) or data.min() < 0:
            raise ValueError("attention values must be finite and non-negative")
        object.__setattr__(self, "data", _frozen(data))

    @property
    def grid(self) -> tuple[int, int]:
        return self.data.shape


@dataclass(frozen=True, order=True)
class Anchor:
    row: int
    col: int
    score: float = 0.0


@dataclass(frozen=True)
class BoxProposal:
    """A box on the patch grid; ``rect`` is (r0, c0, r1, c1), inclusive.

    ``size_index`` is the 1-based proposal index j. Boxes built by the
    random-size baselines carry ``size_index == 0``.
    """

    anchor: Anchor
    size_index: int
    rect: tuple[int, int, int, int]

    def __post_init__(self):
        r0, c0, r1, c1 = self.rect
        if r0 < 0 or c0 < 0 or r1 < r0 or c1 < c0:
            raise ValueError(f"invalid rect {self.rect}")
        object.__setattr__(self, "rect", tuple(int(v) for v in self.rect))

    @classmethod
    def centered(cls, anchor: Anchor, size_index: int, grid: tuple[int, int],
                 scale_step: int = 1) -> "BoxProposal":
        """Square of side ``size_index * scale_step`` patches around ``anchor``, clamped.

        Even sides extend one patch further toward lower indices.
        """
        h, w = grid
        if not (0 <= anchor.row < h and 0 <= anchor.col < w):
            raise ValueError(f"anchor {anchor} outside grid {grid}")
        if size_index < 1 or scale_step < 1:
            raise ValueError("size_index and scale_step must be >= 1")
        side = size_index * scale_step
        r0 = anchor.row - side // 2
        c0 = anchor.col - side // 2
        r1 = r0 + side - 1
        c1 = c0 + side - 1
        rect = (max(r0, 0), max(c0, 0), min(r1, h - 1), min(c1, w - 1))
        return cls(anchor, size_index, rect)

    @property
    def height(self) -> int:
        return self.rect[2] - self.rect[0] + 1

    @property
    def width(self) -> int:
        return self.rect[3] - self.rect[1] + 1

    @property
    def area(self) -> int:
        return self.height * self.width

    def fits(self, grid: tuple[int, int]) -> bool:
        return self.rect[2] < grid[0] and self.rect[3] < grid[1]

    def to_dict(self) -> dict:
        return {
            "anchor": {"row": self.anchor.row, "col": self.anchor.col,
                       "score": float(self.anchor.score)},
            "size_index": self.size_index,
            "rect": list(self.rect),
        }


@dataclass(frozen=True, eq=False)
class RegionMask:
    """Binary (H, W) edit mask handed to the editor backend."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=bool)
        if data.ndim != 2:
            raise ValueError("mask must be 2-D")
        object.__setattr__(self, "data", _frozen(data, dtype=bool))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def count(self) -> int:
        return int(self.data.sum())


@dataclass(frozen=True, eq=False)
class EmbeddingVector:
    data: np.ndarray
    degenerate: bool = field(default=False)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(data)):
            raise ValueError("embedding contains non-finite values")
        object.__setattr__(self, "data", _frozen(data))
        if np.linalg.norm(data) < DEGENERATE_NORM:
            object.__setattr__(self, "degenerate", True)

    @property
    def dim(self) -> int:
        return self.data.shape[0]

    def __sub__(self, other: "EmbeddingVector") -> "EmbeddingVector":
        return EmbeddingVector(self.data - other.data)


def _as_vector(v) -> np.ndarray:
    if isinstance(v, EmbeddingVector):
        return v.data
    return np.asarray(v, dtype=np.float64).reshape(-1)


def cosine_similarity(a, b) -> float | None:
    """Cosine similarity, or ``None`` when either vector is (near) zero."""
    a, b = _as_vector(a), _as_vector(b)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < DEGENERATE_NORM or nb < DEGENERATE_NORM:
        return None
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def cosine_distance(a, b) -> float:
    """``1 - cos(a, b)`` in [0, 2]; a zero-norm operand gives 1."""
    sim = cosine_similarity(a, b)
    if sim is None:
        return DEGENERATE_DISTANCE
    return 1.0 - sim


def mask_pixel_bounds(box: BoxProposal, patch_stride: int, height: int,
                      width: int) -> tuple[int, int, int, int]:
    """Pixel extent (y0, x0, y1, x1), half-open, covered by ``box``."""
    r0, c0, r1, c1 = box.rect
    return (r0 * patch_stride, c0 * patch_stride,
            min((r1 + 1) * patch_stride, height), min((c1 + 1) * patch_stride, width))


def rasterize_mask(box: BoxProposal, patch_stride: int, height: int, width: int,
                   grid: tuple[int, int] | None = None) -> RegionMask:
    if patch_stride < 1:
        raise ValueError("patch_stride must be >= 1")
    if height <= 0 or width <= 0:
        raise ValueError("image size must be positive")
    implied = (-(-height // patch_stride), -(-width // patch_stride))
    if grid is not None and tuple(grid) != implied:
        raise ValueError(
            f"grid {tuple(grid)} does not match image {height}x{width} at stride "
            f"{patch_stride} (expected {implied})")
    if not box.fits(implied):
        raise ValueError(f"box {box.rect} exceeds grid {implied}")
    y0, x0, y1, x1 = mask_pixel_bounds(box, patch_stride, height, width)
    data = np.zeros((height, width), dtype=bool)
    data[y0:y1, x0:x1] = True
    return RegionMask(data)


def derive_seed(master_seed: int, *parts: int) -> int:
    """Deterministic 32-bit child seed for (master_seed, *parts)."""
    state = np.random.SeedSequence([int(master_seed), *(int(p) for p in parts)])
    return int(state.generate_state(1)[0])
