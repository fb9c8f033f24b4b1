"""Adapters for pretrained models: DINO ViT-B/16, CLIP ViT-B/16, SD inpainting.

Heavy dependencies are imported lazily; a missing package or checkpoint
surfaces as a non-retryable ``BackendError``. Every adapter resizes its
input to the backbone's native 224x224 and keeps the scale factor so masks
and grids can be mapped back.

CLIP crop policy: the whole image is resized (no centre crop) to 224x224
before encoding, for both source and edited images.
"""

from __future__ import annotations

import numpy as np

from ..core import AttentionMap, EmbeddingVector, FeatureMap, ImageBuffer, RegionMask
from .base import BackendError, UnsupportedInputError

NATIVE_SIZE = 224
DINO_MODEL = "facebook/dino-vitb16"
CLIP_MODEL = "openai/clip-vit-base-patch16"
INPAINT_MODEL = "runwayml/stable-diffusion-inpainting"
GUIDANCE_SCALE = 7.5
STRENGTH = 0.75


def _require(module: str):
    try:
        return __import__(module, fromlist=["_"])
    except ImportError as exc:
        raise BackendError(f"{module} is not installed; pip install 'artifact[real]'") from exc


def _resize(image: ImageBuffer, size: int = NATIVE_SIZE) -> tuple[np.ndarray, tuple[float, float]]:
    from PIL import Image

    pil = Image.fromarray(image.to_uint8())
    resized = np.asarray(pil.resize((size, size), Image.BICUBIC), dtype=np.float32) / 255.0
    return resized, (image.height / size, image.width / size)


class DinoFeatureBackend:
    """Last-layer patch features and head-averaged [CLS] attention from DINO."""

    patch_stride = 16
    feature_dim = 768
    serial_only = True

    def __init__(self, model_id: str = DINO_MODEL, device: str = "cpu"):
        self.identifier = model_id
        self.checksum = None
        self.device = device
        self._model = None
        self.last_resize_factor = (1.0, 1.0)

    def _load(self):
        if self._model is None:
            transformers = _require("transformers")
            try:
                self._model = transformers.ViTModel.from_pretrained(
                    self.identifier, add_pooling_layer=False, attn_implementation="eager"
                ).to(self.device).eval()
            except Exception as exc:
                raise BackendError(f"cannot load {self.identifier}: {exc}") from exc
        return self._model

    def grid_for(self, height: int, width: int) -> tuple[int, int]:
        # callers pre-resize; masks are rasterized on this same grid
        if (height, width) != (NATIVE_SIZE, NATIVE_SIZE):
            raise UnsupportedInputError(
                f"image {height}x{width} unsupported: resize to {NATIVE_SIZE}x{NATIVE_SIZE} first")
        return NATIVE_SIZE // self.patch_stride, NATIVE_SIZE // self.patch_stride

    def extract(self, image: ImageBuffer) -> tuple[FeatureMap, AttentionMap]:
        import torch

        h, w = self.grid_for(image.height, image.width)
        model = self._load()
        pixels, self.last_resize_factor = _resize(image)
        mean = np.array([0.485, 0.456, 0.406], dtype=np.float32)
        std = np.array([0.229, 0.224, 0.225], dtype=np.float32)
        x = torch.from_numpy(((pixels - mean) / std).transpose(2, 0, 1))[None].to(self.device)
        with torch.no_grad():
            out = model(pixel_values=x, output_attentions=True)
        tokens = out.last_hidden_state[0, 1:].cpu().numpy()
        features = tokens.T.reshape(self.feature_dim, h, w)
        # last layer, [CLS] query over patch keys, mean over heads
        attn = out.attentions[-1][0, :, 0, 1:].mean(dim=0).cpu().numpy().reshape(h, w)
        return FeatureMap(features), AttentionMap(np.maximum(attn, 0.0))


class ClipScorerBackend:
    embed_dim = 512
    serial_only = True

    def __init__(self, model_id: str = CLIP_MODEL, device: str = "cpu"):
        self.identifier = model_id
        self.checksum = None
        self.device = device
        self._model = None
        self._processor = None

    def _load(self):
        if self._model is None:
            transformers = _require("transformers")
            try:
                self._model = transformers.CLIPModel.from_pretrained(self.identifier).to(self.device).eval()
                self._processor = transformers.CLIPProcessor.from_pretrained(self.identifier)
            except Exception as exc:
                raise BackendError(f"cannot load {self.identifier}: {exc}") from exc
        return self._model, self._processor

    def _pixels(self, image: ImageBuffer):
        import torch

        pixels, _ = _resize(image)
        mean = np.array([0.48145466, 0.4578275, 0.40821073], dtype=np.float32)
        std = np.array([0.26862954, 0.26130258, 0.27577711], dtype=np.float32)
        return torch.from_numpy(((pixels - mean) / std).transpose(2, 0, 1))[None].to(self.device)

    def embed_image(self, image: ImageBuffer) -> EmbeddingVector:
        import torch

        model, _ = self._load()
        with torch.no_grad():
            v = model.get_image_features(pixel_values=self._pixels(image))
        v = getattr(v, "pooler_output", v)
        return EmbeddingVector(v[0].cpu().numpy())

    def embed_text(self, text: str) -> EmbeddingVector:
        import torch

        model, processor = self._load()
        batch = processor(text=[text], return_tensors="pt", padding=True, truncation=True)
        with torch.no_grad():
            v = model.get_text_features(**{k: t.to(self.device) for k, t in batch.items()})
        v = getattr(v, "pooler_output", v)
        return EmbeddingVector(v[0].cpu().numpy())

    def patch_tokens(self, image: ImageBuffer) -> np.ndarray:
        import torch

        model, _ = self._load()
        with torch.no_grad():
            out = model.vision_model(pixel_values=self._pixels(image))
        return out.last_hidden_state[0, 1:].cpu().numpy().astype(np.float64)


class DiffusionInpaintEditor:
    """Stable Diffusion inpainting; the result is composited back outside the mask."""

    kind = "diffusion-inpaint"
    serial_only = True

    def __init__(self, model_id: str = INPAINT_MODEL, device: str = "cpu",
                 guidance_scale: float = GUIDANCE_SCALE, strength: float = STRENGTH,
                 num_inference_steps: int = 50):
        self.identifier = model_id
        self.checksum = None
        self.device = device
        self.guidance_scale = guidance_scale
        self.strength = strength
        self.num_inference_steps = num_inference_steps
        self._pipe = None

    def _load(self):
        if self._pipe is None:
            diffusers = _require("diffusers")
            try:
                self._pipe = diffusers.StableDiffusionInpaintPipeline.from_pretrained(
                    self.identifier, safety_checker=None).to(self.device)
            except Exception as exc:
                raise BackendError(f"cannot load {self.identifier}: {exc}") from exc
        return self._pipe

    def edit(self, image: ImageBuffer, mask: RegionMask, prompt: str, seed: int) -> ImageBuffer:
        import torch
        from PIL import Image

        pipe = self._load()
        size = (image.width - image.width % 8, image.height - image.height % 8)
        src = Image.fromarray(image.to_uint8()).resize(size)
        msk = Image.fromarray(mask.data.astype(np.uint8) * 255).resize(size, Image.NEAREST)
        generator = torch.Generator(device="cpu").manual_seed(int(seed))
        try:
            result = pipe(prompt=prompt, image=src, mask_image=msk, height=size[1], width=size[0],
                          guidance_scale=self.guidance_scale, strength=self.strength,
                          num_inference_steps=self.num_inference_steps, generator=generator).images[0]
        except RuntimeError as exc:
            raise BackendError(f"inpainting failed: {exc}", retryable=True) from exc
        generated = np.asarray(result.resize((image.width, image.height), Image.BICUBIC),
                               dtype=np.float64) / 255.0
        out = np.where(mask.data[..., None], generated, image.data)
        return ImageBuffer(np.clip(out, 0.0, 1.0))


class MaskGitEditorStub:
    """Interface stub for a token-grid transformer editor.

    Such editors only accept box-shaped masks on their VQ token grid; this
    stub converts pixel masks to token boxes and stops there.
    """

    kind = "maskgit-stub"
    serial_only = True
    identifier = "maskgit-stub"
    checksum = None

    def __init__(self, token_grid: int = 16, image_size: int = 256):
        self.token_grid = token_grid
        self.image_size = image_size

    def mask_to_token_box(self, mask: RegionMask) -> tuple[int, int, int, int]:
        ys, xs = np.nonzero(mask.data)
        if ys.size == 0:
            raise ValueError("mask is empty")
        sy = self.token_grid / mask.height
        sx = self.token_grid / mask.width
        return (int(ys.min() * sy), int(xs.min() * sx),
                int(np.ceil((ys.max() + 1) * sy)) - 1, int(np.ceil((xs.max() + 1) * sx)) - 1)

    def edit(self, image: ImageBuffer, mask: RegionMask, prompt: str, seed: int) -> ImageBuffer:
        self.mask_to_token_box(mask)
        raise BackendError("MaskGIT editing is not bundled; provide an adapter", retryable=False)


def real_backends(device: str = "cpu"):
    from .base import Backends

    return Backends(DinoFeatureBackend(device=device), ClipScorerBackend(device=device),
                    DiffusionInpaintEditor(device=device))

