"""Ablation / comparison harness producing per-method mean quality scores.

Each (method, image) cell is computed independently from a seed derived
from the master seed and the image index, so results do not depend on
``jobs`` or on execution order. A failing cell is recorded on its row and
excluded from the means.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .backends.base import BackendError, Backends, edit_image
from .baselines import baseline_random_random, dino_random_boxes
from .core import BoxProposal, ImageBuffer, derive_seed, rasterize_mask
from .imaging import InputError, load_image
from .losses import LossContext, LossWeights, PromptSpec, QualityScore
from .scenarios import synthetic_scenario
from .trainer import EditFailed, TrainConfig, infer_best_edit, train_region_generator

log = logging.getLogger(__name__)

METHODS = ("ours", "random-random", "dino-random")
LOSS_PRESETS = {
    "clip": LossWeights(1.0, 0.0, 0.0),
    "clip+str": LossWeights(1.0, 1.0, 0.0),
    "clip+dir": LossWeights(1.0, 0.0, 1.0),
    "clip+str+dir": LossWeights(1.0, 1.0, 1.0),
}

_TAG_ITEM = 5
_TAG_BASELINE_EDIT = 6


@dataclass
class EvalItem:
    name: str
    image: ImageBuffer
    prompt: PromptSpec
    backends: Backends


@dataclass(frozen=True)
class MethodSpec:
    label: str
    kind: str
    config: TrainConfig


@dataclass
class EvalRow:
    method: str
    mean_s_t2i: float | None
    mean_s_i2i: float | None
    n_images: int
    n_failed: int
    errors: list[str]

    def to_dict(self) -> dict:
        return {"method": self.method, "mean_s_t2i": self.mean_s_t2i,
                "mean_s_i2i": self.mean_s_i2i, "n_images": self.n_images,
                "n_failed": self.n_failed, "errors": self.errors}


@dataclass
class EvalReport:
    rows: list[EvalRow]
    images: list[str]

    def to_dict(self) -> dict:
        return {"images": self.images, "rows": [r.to_dict() for r in self.rows]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["method", "mean_s_t2i", "mean_s_i2i", "n_images", "n_failed"])
        for r in self.rows:
            writer.writerow([r.method, _fmt(r.mean_s_t2i), _fmt(r.mean_s_i2i), r.n_images,
                             r.n_failed])
        return buf.getvalue()

    def write(self, out_dir: str | Path) -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path, json_path = out_dir / "report.csv", out_dir / "report.json"
        csv_path.write_text(self.to_csv())
        json_path.write_text(self.to_json())
        return csv_path, json_path


def _fmt(v: float | None) -> str:
    return "" if v is None else f"{v:.6f}"


def build_methods(methods: list[str], base: TrainConfig, sweep_proposals: list[int] = (),
                  sweep_anchors: list[int] = (), sweep_losses: list[str] = ()) -> list[MethodSpec]:
    """Expand method names and sweeps into labelled configurations, in a fixed order."""
    specs = []
    for name in methods:
        if name not in METHODS:
            raise ValueError(f"unknown method {name!r}; choose from {METHODS}")
        specs.append(MethodSpec(name, name, base))
    for m in sweep_proposals:
        specs.append(MethodSpec(f"ours[M={m}]", "ours", replace(base, m=m)))
    for k in sweep_anchors:
        specs.append(MethodSpec(f"ours[K={k}]", "ours", replace(base, k=k)))
    for preset in sweep_losses:
        if preset not in LOSS_PRESETS:
            raise ValueError(f"unknown loss preset {preset!r}; choose from {sorted(LOSS_PRESETS)}")
        specs.append(MethodSpec(f"ours[loss={preset}]", "ours",
                                replace(base, weights=LOSS_PRESETS[preset])))
    if not specs:
        raise ValueError("no methods selected")
    labels = [s.label for s in specs]
    if len(set(labels)) != len(labels):
        raise ValueError(f"duplicate methods in {labels}")
    return specs


def _best_of_boxes(item: EvalItem, boxes: list[BoxProposal], config: TrainConfig,
                   seed: int) -> QualityScore:
    b = item.backends
    ctx = LossContext(b.scorer, item.image, item.prompt, config.weights, config.alpha, config.beta)
    best: tuple[float, int, QualityScore] | None = None
    for i, box in enumerate(boxes):
        mask = rasterize_mask(box, b.feature.patch_stride, item.image.height, item.image.width)
        edited = edit_image(b.editor, item.image, mask, item.prompt.prompt,
                            derive_seed(seed, _TAG_BASELINE_EDIT, i))
        q = ctx.quality(edited)
        if best is None or (-q.s, i) < (-best[0], best[1]):
            best = (q.s, i, q)
    return best[2]


def run_cell(item: EvalItem, spec: MethodSpec, seed: int) -> QualityScore:
    """Winner quality score of one method on one image."""
    config = replace(spec.config, seed=seed)
    if spec.kind == "ours":
        trained = train_region_generator(item.image, item.prompt, item.backends, config)
        winner, _ = infer_best_edit(item.image, item.prompt, trained.params, item.backends,
                                    config, trained.prepared)
        return winner.score
    rng = np.random.default_rng(seed)
    stride = item.backends.feature.patch_stride
    if spec.kind == "random-random":
        boxes = [baseline_random_random(item.image, rng, stride) for _ in range(config.k)]
    else:
        boxes = dino_random_boxes(item.image, item.backends.feature, rng, config.k)
    return _best_of_boxes(item, boxes, config, seed)


def run_eval(items: list[EvalItem], specs: list[MethodSpec], seed: int = 0,
             jobs: int = 1) -> EvalReport:
    if not items:
        raise ValueError("evaluation needs at least one image")
    cells = [(si, ii) for si in range(len(specs)) for ii in range(len(items))]

    def one(cell):
        si, ii = cell
        try:
            return run_cell(items[ii], specs[si], derive_seed(seed, _TAG_ITEM, ii))
        except (BackendError, EditFailed, ValueError) as exc:
            log.warning("%s on %s failed: %s", specs[si].label, items[ii].name, exc)
            return f"{items[ii].name}: {exc}"

    serial = jobs <= 1 or any(it.backends.serial_only for it in items)
    if serial:
        results = [one(c) for c in cells]
    else:
        with ThreadPoolExecutor(jobs) as pool:
            results = list(pool.map(one, cells))
    rows = []
    for si, spec in enumerate(specs):
        scores, errors = [], []
        for ii in range(len(items)):
            r = results[si * len(items) + ii]
            (errors if isinstance(r, str) else scores).append(r)
        rows.append(EvalRow(
            spec.label,
            float(np.mean([q.s_t2i for q in scores])) if scores else None,
            float(np.mean([q.s_i2i for q in scores])) if scores else None,
            len(scores), len(errors), errors))
    return EvalReport(rows, [it.name for it in items])


def load_manifest(path: str | Path, backends_factory: Callable[[], Backends],
                  working_size: int | None = 224) -> list[EvalItem]:
    """Items from a JSON manifest.

    Either a list or ``{"items": [...]}``; each entry has ``image`` (relative
    paths resolve against the manifest) or ``synthetic`` (a scenario name),
    plus ``prompt`` and optional ``roi_text``.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot read manifest {path}: {exc}") from exc
    entries = doc["items"] if isinstance(doc, dict) else doc
    if not isinstance(entries, list) or not entries:
        raise InputError(f"manifest {path} lists no items")
    items = []
    shared = None
    for i, e in enumerate(entries):
        if "synthetic" in e:
            items.append(synthetic_item(e["synthetic"], int(e.get("seed", 0))))
            continue
        if "image" not in e or "prompt" not in e:
            raise InputError(f"manifest entry {i} needs 'image' and 'prompt'")
        img_path = Path(e["image"])
        if not img_path.is_absolute():
            img_path = path.parent / img_path
        loaded = load_image(img_path, working_size)
        shared = shared or backends_factory()
        items.append(EvalItem(str(e["image"]), loaded.image,
                              PromptSpec(e["prompt"], e.get("roi_text")), shared))
    return items


def synthetic_item(name: str = "grow", seed: int = 0) -> EvalItem:
    sc = synthetic_scenario(name, seed)
    return EvalItem(f"synthetic:{name}:{seed}", sc.image, sc.prompt, sc.backends())
