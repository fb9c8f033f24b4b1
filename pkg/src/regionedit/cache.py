"""Content-addressed on-disk cache for backend results.

Layout: ``<root>/<first 2 hex chars>/<sha256 key>/`` holding ``payload.npz``
and an ``index.json`` with the payload checksum. A checksum mismatch or an
unreadable entry is evicted and treated as a miss.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import shutil
from pathlib import Path

import numpy as np

from .backends.base import Backends, EditorBackend, FeatureBackend
from .core import AttentionMap, FeatureMap, ImageBuffer, RegionMask

ENV_CACHE_DIR = "REGIONEDIT_CACHE_DIR"


def default_cache_root() -> Path:
    env = os.environ.get(ENV_CACHE_DIR)
    if env:
        return Path(env)
    return Path.home() / ".cache" / "regionedit"


def array_digest(array: np.ndarray) -> str:
    a = np.ascontiguousarray(array)
    h = hashlib.sha256()
    h.update(f"{a.dtype.str}:{a.shape}".encode())
    h.update(a.tobytes())
    return h.hexdigest()


def make_key(kind: str, **identity) -> str:
    canonical = json.dumps({"kind": kind, **identity}, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


class ArtifactCache:
    def __init__(self, root: Path | str | None = None):
        self.root = Path(root) if root is not None else default_cache_root()
        self.hits = 0
        self.misses = 0
        self.evictions = 0

    def _entry(self, key: str) -> Path:
        return self.root / key[:2] / key

    def get(self, key: str) -> dict[str, np.ndarray] | None:
        entry = self._entry(key)
        try:
            index = json.loads((entry / "index.json").read_text())
            payload = (entry / "payload.npz").read_bytes()
        except (OSError, ValueError):
            if entry.exists():
                self._evict(entry)
            self.misses += 1
            return None
        if hashlib.sha256(payload).hexdigest() != index.get("checksum"):
            self._evict(entry)
            self.misses += 1
            return None
        with np.load(io.BytesIO(payload), allow_pickle=False) as data:
            out = {name: data[name] for name in data.files}
        self.hits += 1
        return out

    def put(self, key: str, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
        buf = io.BytesIO()
        np.savez(buf, **arrays)
        payload = buf.getvalue()
        entry = self._entry(key)
        entry.mkdir(parents=True, exist_ok=True)
        tmp = entry / "payload.npz.tmp"
        tmp.write_bytes(payload)
        tmp.replace(entry / "payload.npz")
        index = {"key": key, "checksum": hashlib.sha256(payload).hexdigest(),
                 "files": ["payload.npz"], "meta": meta or {}}
        (entry / "index.json").write_text(json.dumps(index, sort_keys=True, indent=2))

    def _evict(self, entry: Path) -> None:
        shutil.rmtree(entry, ignore_errors=True)
        self.evictions += 1

    def entries(self) -> list[Path]:
        if not self.root.exists():
            return []
        return sorted(p for p in self.root.glob("??/*") if p.is_dir())

    def stats(self) -> dict:
        entries = self.entries()
        size = sum(f.stat().st_size for e in entries for f in e.iterdir() if f.is_file())
        return {"root": str(self.root), "entries": len(entries), "bytes": size,
                "hits": self.hits, "misses": self.misses, "evictions": self.evictions}

    def clear(self) -> int:
        entries = self.entries()
        for e in entries:
            shutil.rmtree(e, ignore_errors=True)
        return len(entries)


class CachedFeatureBackend:
    def __init__(self, inner: FeatureBackend, cache: ArtifactCache):
        self.inner = inner
        self.cache = cache
        self.identifier = inner.identifier
        self.checksum = getattr(inner, "checksum", None)
        self.patch_stride = inner.patch_stride
        self.feature_dim = inner.feature_dim
        self.serial_only = inner.serial_only
        self.calls = 0

    def grid_for(self, height: int, width: int) -> tuple[int, int]:
        return self.inner.grid_for(height, width)

    def extract(self, image: ImageBuffer) -> tuple[FeatureMap, AttentionMap]:
        key = make_key("features", backend=self.identifier, checksum=self.checksum,
                       image=array_digest(image.data))
        hit = self.cache.get(key)
        if hit is not None:
            return FeatureMap(hit["features"]), AttentionMap(hit["attention"])
        self.calls += 1
        features, attention = self.inner.extract(image)
        self.cache.put(key, {"features": features.data, "attention": attention.data},
                       {"backend": self.identifier})
        return features, attention


class CachedEditor:
    def __init__(self, inner: EditorBackend, cache: ArtifactCache):
        self.inner = inner
        self.cache = cache
        self.identifier = inner.identifier
        self.checksum = getattr(inner, "checksum", None)
        self.kind = inner.kind
        self.serial_only = inner.serial_only
        self.calls = 0

    def edit_key(self, image: ImageBuffer, mask: RegionMask, prompt: str, seed: int) -> str:
        return make_key("edit", backend=self.identifier, checksum=self.checksum,
                        image=array_digest(image.data), mask=array_digest(mask.data),
                        prompt=prompt, seed=int(seed))

    def edit(self, image: ImageBuffer, mask: RegionMask, prompt: str, seed: int) -> ImageBuffer:
        key = self.edit_key(image, mask, prompt, seed)
        hit = self.cache.get(key)
        if hit is not None:
            return ImageBuffer(hit["image"])
        self.calls += 1
        out = self.inner.edit(image, mask, prompt, seed)
        self.cache.put(key, {"image": out.data}, {"backend": self.identifier, "seed": int(seed)})
        return out


def with_cache(backends: Backends, cache: ArtifactCache) -> Backends:
    return Backends(CachedFeatureBackend(backends.feature, cache), backends.scorer,
                    CachedEditor(backends.editor, cache))
