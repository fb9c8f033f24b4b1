"""Image file I/O and overlay rendering for the command-line tools."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw, UnidentifiedImageError

from .core import BoxProposal, ImageBuffer, mask_pixel_bounds

DEFAULT_WORKING_SIZE = 224


class InputError(ValueError):
    """Unreadable or unusable input file."""


@dataclass(frozen=True)
class LoadedImage:
    image: ImageBuffer
    path: str
    sha256: str
    original_size: tuple[int, int]  # (H, W)
    working_size: tuple[int, int]

    @property
    def resize_factor(self) -> tuple[float, float]:
        return (self.original_size[0] / self.working_size[0],
                self.original_size[1] / self.working_size[1])

    def to_dict(self) -> dict:
        return {"path": self.path, "sha256": self.sha256,
                "original_size": list(self.original_size),
                "working_size": list(self.working_size),
                "resize_factor": list(self.resize_factor)}


def load_image(path: str | Path, working_size: int | None = DEFAULT_WORKING_SIZE) -> LoadedImage:
    """Read a PNG/JPEG as RGB and resize it to ``working_size`` squared (bicubic)."""
    path = Path(path)
    try:
        raw = path.read_bytes()
        with Image.open(path) as pil:
            pil = pil.convert("RGB")
            original = (pil.height, pil.width)
            if working_size and original != (working_size, working_size):
                pil = pil.resize((working_size, working_size), Image.BICUBIC)
            array = np.asarray(pil, dtype=np.uint8)
    except (OSError, UnidentifiedImageError) as exc:
        raise InputError(f"cannot read image {path}: {exc}") from exc
    return LoadedImage(ImageBuffer.from_uint8(array), str(path), hashlib.sha256(raw).hexdigest(),
                       original, (array.shape[0], array.shape[1]))


def save_png(image: ImageBuffer | np.ndarray, path: str | Path) -> None:
    array = image.to_uint8() if isinstance(image, ImageBuffer) else np.asarray(image, dtype=np.uint8)
    # no metadata chunks, so equal pixels give equal bytes
    Image.fromarray(array, "RGB").save(path, format="PNG", optimize=False)


def box_outline(box: BoxProposal, patch_stride: int, height: int,
                width: int) -> tuple[int, int, int, int]:
    """Inclusive (x0, y0, x1, y1) pixel rectangle for drawing, same extent as the mask."""
    y0, x0, y1, x1 = mask_pixel_bounds(box, patch_stride, height, width)
    return x0, y0, x1 - 1, y1 - 1


def attention_heatmap(image: ImageBuffer, attention: np.ndarray, patch_stride: int,
                      anchors=()) -> np.ndarray:
    attn = np.asarray(attention, dtype=np.float64)
    span = attn.max() - attn.min()
    norm = (attn - attn.min()) / span if span > 0 else np.zeros_like(attn)
    up = np.kron(norm, np.ones((patch_stride, patch_stride)))[:image.height, :image.width]
    heat = np.stack([up, np.zeros_like(up), 1.0 - up], axis=-1)
    blended = 0.5 * image.data + 0.5 * heat
    pil = Image.fromarray(np.floor(blended * 255 + 0.5).astype(np.uint8), "RGB")
    draw = ImageDraw.Draw(pil)
    for a in anchors:
        cy, cx = (a.row + 0.5) * patch_stride, (a.col + 0.5) * patch_stride
        draw.ellipse((cx - 3, cy - 3, cx + 3, cy + 3), fill=(255, 255, 0))
    return np.asarray(pil)


_PALETTE = [(230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200), (245, 130, 48),
            (145, 30, 180), (70, 240, 240), (240, 50, 230), (210, 245, 60), (250, 190, 190)]


def draw_boxes(image: ImageBuffer, boxes: list[BoxProposal], patch_stride: int) -> np.ndarray:
    pil = Image.fromarray(image.to_uint8(), "RGB")
    draw = ImageDraw.Draw(pil)
    for i, box in enumerate(boxes):
        draw.rectangle(box_outline(box, patch_stride, image.height, image.width),
                       outline=_PALETTE[i % len(_PALETTE)], width=2)
    return np.asarray(pil)
