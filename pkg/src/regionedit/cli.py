"""``regionedit`` command line: edit, inspect, eval and cache.

Settings resolve as CLI flag > ``--config`` TOML file > built-in default.
Exit codes: 0 ok, 2 input error, 3 backend error, 64 usage error.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import platform
import sys
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
import torch

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .backends.base import BackendError, Backends, UnsupportedInputError
from .backends.mock import MockWorld
from .cache import ArtifactCache, with_cache
from .core import mask_pixel_bounds
from .evaluation import LOSS_PRESETS, METHODS, build_methods, load_manifest, run_eval, synthetic_item
from .imaging import (
    DEFAULT_WORKING_SIZE,
    InputError,
    LoadedImage,
    attention_heatmap,
    draw_boxes,
    load_image,
    save_png,
)
from .losses import LossWeights, PromptSpec
from .regions import save_params
from .trainer import EditCandidate, EditFailed, TrainConfig, infer_best_edit, train_region_generator

log = logging.getLogger("regionedit")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_BACKEND = 3
EXIT_USAGE = 64

SIDECAR_FORMAT = "regionedit-sidecar/1"
MANIFEST_FORMAT = "regionedit-manifest/1"

DEFAULTS = {
    "seed": 0,
    "anchors": 8,
    "proposals": 7,
    "pool_size": 7,
    "epochs": 5,
    "lr": 0.003,
    "alpha": 2.0,
    "beta": 1.0,
    "lambda_clip": 1.0,
    "lambda_str": 1.0,
    "lambda_dir": 1.0,
    "roi_text": None,
    "gradient_mode": "full-eval",
    "ema_decay": 0.9,
    "steps_per_epoch": None,
    "scale_step": 1,
    "backend": "mock",
    "jobs": 1,
    "no_cache": False,
    "size": DEFAULT_WORKING_SIZE,
    "out": ".",
}
_TYPES = {"seed": int, "anchors": int, "proposals": int, "pool_size": int, "epochs": int,
          "lr": float, "alpha": float, "beta": float, "lambda_clip": float, "lambda_str": float,
          "lambda_dir": float, "roi_text": str, "gradient_mode": str, "ema_decay": float,
          "steps_per_epoch": int, "scale_step": int, "backend": str, "jobs": int,
          "no_cache": bool, "size": int, "out": str}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _shared_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("shared")
    # defaults stay None so that config-file values can fill the gaps
    g.add_argument("--config", help="TOML file of flat key = value settings")
    g.add_argument("--seed", type=int)
    g.add_argument("--anchors", type=int, metavar="K")
    g.add_argument("--proposals", type=int, metavar="M")
    g.add_argument("--pool-size", type=int, metavar="L")
    g.add_argument("--epochs", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--alpha", type=float)
    g.add_argument("--beta", type=float)
    g.add_argument("--lambda-clip", type=float)
    g.add_argument("--lambda-str", type=float)
    g.add_argument("--lambda-dir", type=float)
    g.add_argument("--roi-text")
    g.add_argument("--gradient-mode", choices=("full-eval", "sampled-ema"))
    g.add_argument("--ema-decay", type=float)
    g.add_argument("--steps-per-epoch", type=int)
    g.add_argument("--scale-step", type=int)
    g.add_argument("--backend", choices=("mock", "real"))
    g.add_argument("--jobs", type=int)
    g.add_argument("--no-cache", action="store_true", default=None)
    g.add_argument("--size", type=int, help="working resolution (square), default 224")
    g.add_argument("--out", metavar="DIR")
    g.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    shared = _shared_flags()
    parser = _Parser(prog="regionedit", description="Mask-free local image editing")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("edit", parents=[shared], help="train, edit and write the best result")
    p.add_argument("image")
    p.add_argument("prompt")

    p = sub.add_parser("inspect", parents=[shared], help="write region and candidate overlays")
    p.add_argument("image")
    p.add_argument("prompt")

    p = sub.add_parser("eval", parents=[shared], help="compare methods over an image set")
    p.add_argument("manifest", nargs="?", help="JSON list of {image, prompt, roi_text}")
    p.add_argument("--synthetic", action="append", default=[], metavar="NAME",
                   help="add a built-in synthetic scene (grow, shrink)")
    p.add_argument("--synthetic-count", type=int, default=1, metavar="N",
                   help="seeds per synthetic scene")
    p.add_argument("--methods", default="ours",
                   help=f"comma list from {','.join(METHODS)}; empty to run sweeps only")
    p.add_argument("--sweep-proposals", default="", metavar="M,...")
    p.add_argument("--sweep-anchors", default="", metavar="K,...")
    p.add_argument("--sweep-losses", default="", metavar="PRESET,...",
                   help=f"presets: {','.join(LOSS_PRESETS)}")

    p = sub.add_parser("cache", parents=[shared], help="inspect or clear the artifact cache")
    p.add_argument("action", choices=("stats", "clear"))
    return parser


def _load_config(path: str) -> dict:
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise UsageError(f"invalid config {path}: {exc}") from exc
    out = {}
    for key, value in raw.items():
        name = key.replace("-", "_")
        if name not in DEFAULTS:
            raise UsageError(f"unknown config key {key!r}")
        want = _TYPES[name]
        if want is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if not isinstance(value, want) or (want is int and isinstance(value, bool)):
            raise UsageError(f"config key {key!r} must be {want.__name__}")
        out[name] = value
    return out


def resolve_settings(args: argparse.Namespace) -> dict:
    settings = dict(DEFAULTS)
    if args.config:
        settings.update(_load_config(args.config))
    for name in DEFAULTS:
        value = getattr(args, name, None)
        if value is not None:
            settings[name] = value
    return settings


def train_config(settings: dict) -> TrainConfig:
    try:
        return TrainConfig(
            k=settings["anchors"], m=settings["proposals"], l=settings["pool_size"],
            epochs=settings["epochs"], learning_rate=settings["lr"],
            weights=LossWeights(settings["lambda_clip"], settings["lambda_str"],
                                settings["lambda_dir"]),
            alpha=settings["alpha"], beta=settings["beta"],
            gradient_mode=settings["gradient_mode"], ema_decay=settings["ema_decay"],
            steps_per_epoch=settings["steps_per_epoch"], seed=settings["seed"],
            scale_step=settings["scale_step"], jobs=settings["jobs"])
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def make_backends(settings: dict) -> tuple[Backends, ArtifactCache | None]:
    if settings["backend"] == "real":
        from .backends.real import real_backends

        backends = real_backends()
    else:
        backends = MockWorld().backends()
    if settings["no_cache"]:
        return backends, None
    cache = ArtifactCache()
    return with_cache(backends, cache), cache


def candidate_document(c: EditCandidate, patch_stride: int) -> dict:
    doc = c.to_dict()
    doc["mask_bounds"] = list(mask_pixel_bounds(c.box, patch_stride, c.edited.height,
                                                c.edited.width))
    return doc


def ranked(candidates: list[EditCandidate]) -> list[EditCandidate]:
    return sorted(candidates, key=lambda c: (-c.score.s, c.anchor_id))


def sidecar_document(prompt: PromptSpec, winner: EditCandidate, candidates: list[EditCandidate],
                     patch_stride: int) -> dict:
    return {
        "format": SIDECAR_FORMAT,
        "prompt": prompt.prompt,
        "roi_text": prompt.resolved_roi_text,
        "roi_text_defaulted": prompt.roi_defaulted,
        "image_size": [winner.edited.height, winner.edited.width],
        "patch_stride": patch_stride,
        "winner": candidate_document(winner, patch_stride),
        "candidates": [candidate_document(c, patch_stride) for c in ranked(candidates)],
    }


def sidecar_schema() -> dict:
    text = resources.files("regionedit").joinpath("schemas/sidecar.schema.json").read_text()
    return json.loads(text)


def validate_sidecar(doc: dict) -> None:
    jsonschema.validate(doc, sidecar_schema())


def _dump(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _decisions(config: TrainConfig, prompt: PromptSpec) -> dict:
    return {
        "gradient_mode": config.gradient_mode,
        "gradient_routing": "weighted detached loss: sum_j softmax(logits + gumbel)_j * loss_j, "
                            "losses treated as constants",
        "roi_text": {"value": prompt.resolved_roi_text, "defaulted": prompt.roi_defaulted},
        "anchor_tie_rule": "equal attention: lower row-major index first",
        "winner_tie_rule": "equal quality score: lower anchor index wins",
        "inference_selection": "argmax of logits, no noise",
        "attention_heads": "mean over heads of the [CLS] query",
        "scorer_crop": "whole image resized, no crop",
        "generator_init": "uniform +-1/sqrt(fan_in); scoring layer zero",
        "gumbel_temperature": 1.0,
    }


@dataclass
class _Run:
    loaded: LoadedImage
    prompt: PromptSpec
    config: TrainConfig
    backends: Backends
    trained: object
    winner: EditCandidate
    candidates: list[EditCandidate]


def _train_and_infer(args, settings: dict) -> _Run:
    config = train_config(settings)
    loaded = load_image(args.image, settings["size"])
    try:
        prompt = PromptSpec(args.prompt, settings["roi_text"])
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    backends, _ = make_backends(settings)
    trained = train_region_generator(loaded.image, prompt, backends, config)
    winner, candidates = infer_best_edit(loaded.image, prompt, trained.params, backends, config,
                                         trained.prepared)
    return _Run(loaded, prompt, config, backends, trained, winner, candidates)


def _manifest(command: str, run: _Run, settings: dict, started: str, outputs: dict) -> dict:
    return {
        "format": MANIFEST_FORMAT,
        "command": command,
        "seed": run.config.seed,
        "config": run.config.to_dict(),
        "settings": {k: v for k, v in settings.items() if k != "out"},
        "backends": run.backends.identifiers(),
        "capabilities": run.backends.capabilities(),
        "decisions": _decisions(run.config, run.prompt),
        "input": run.loaded.to_dict(),
        "prompt": {"prompt": run.prompt.prompt, "roi_text": run.prompt.resolved_roi_text},
        "outputs": outputs,
        "timestamps": {"started": started, "finished": _now()},
        "versions": {"python": platform.python_version(), "numpy": np.__version__,
                     "torch": torch.__version__},
    }


def cmd_edit(args, settings: dict) -> int:
    started = _now()
    run = _train_and_infer(args, settings)
    out = Path(settings["out"])
    out.mkdir(parents=True, exist_ok=True)
    stride = run.backends.feature.patch_stride

    sidecar = sidecar_document(run.prompt, run.winner, run.candidates, stride)
    validate_sidecar(sidecar)
    paths = {"image": out / "edited.png", "sidecar": out / "sidecar.json",
             "log": out / "train_log.jsonl", "params": out / "params.bin"}
    save_png(run.winner.edited, paths["image"])
    paths["sidecar"].write_text(_dump(sidecar))
    paths["log"].write_text("".join(json.dumps(e, sort_keys=True) + "\n" for e in run.trained.log))
    paths["params"].write_bytes(save_params(run.trained.params))
    outputs = {k: {"path": p.name, "sha256": _sha256(p)} for k, p in paths.items()}
    (out / "manifest.json").write_text(_dump(_manifest("edit", run, settings, started, outputs)))

    w = run.winner
    print(f"winner: anchor {w.anchor_id} box {list(w.box.rect)} S={w.score.s:.4f} "
          f"(t2i {w.score.s_t2i:.4f}, i2i {w.score.s_i2i:.4f})")
    print(f"wrote {paths['image']}")
    return EXIT_OK


def cmd_inspect(args, settings: dict) -> int:
    started = _now()
    run = _train_and_infer(args, settings)
    out = Path(settings["out"])
    out.mkdir(parents=True, exist_ok=True)
    prep = run.trained.prepared
    stride = run.backends.feature.patch_stride
    image = run.loaded.image

    save_png(attention_heatmap(image, prep.attention, stride, prep.anchors), out / "attention.png")
    for i, boxes in enumerate(prep.proposals):
        save_png(draw_boxes(image, boxes, stride), out / f"proposals_anchor{i}.png")
    by_anchor = {c.anchor_id: c for c in run.candidates}
    save_png(draw_boxes(image, [by_anchor[a].box for a in sorted(by_anchor)], stride),
             out / "regions.png")

    doc = sidecar_document(run.prompt, run.winner, run.candidates, stride)
    for rank, (c, entry) in enumerate(zip(ranked(run.candidates), doc["candidates"])):
        name = f"candidate{rank:02d}_anchor{c.anchor_id}.png"
        save_png(c.edited, out / name)
        entry["panel"] = name
    validate_sidecar(doc)
    doc["anchors"] = [{"row": a.row, "col": a.col, "score": float(a.score)} for a in prep.anchors]
    doc["selected_proposals"] = [
        {"anchor_id": c.anchor_id, "size_index": c.box.size_index} for c in run.candidates]
    (out / "inspect.json").write_text(_dump(doc))
    (out / "manifest.json").write_text(_dump(_manifest("inspect", run, settings, started, {})))
    print(f"wrote {len(run.candidates)} candidate panels to {out}")
    return EXIT_OK


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"expected a comma list of integers, got {text!r}") from exc


def cmd_eval(args, settings: dict) -> int:
    config = train_config(settings)
    if args.synthetic_count < 1:
        raise UsageError("--synthetic-count must be >= 1")
    items = []
    if args.manifest:
        items += load_manifest(args.manifest, lambda: make_backends(settings)[0],
                               settings["size"])
    for name in args.synthetic:
        try:
            items += [synthetic_item(name, s) for s in range(args.synthetic_count)]
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    if not items:
        raise UsageError("eval needs a manifest or --synthetic NAME")
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    try:
        specs = build_methods(methods, config, _int_list(args.sweep_proposals),
                              _int_list(args.sweep_anchors),
                              [s.strip() for s in args.sweep_losses.split(",") if s.strip()])
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    report = run_eval(items, specs, settings["seed"], settings["jobs"])
    csv_path, _ = report.write(settings["out"])
    sys.stdout.write(report.to_csv())
    print(f"wrote {csv_path}")
    if all(r.n_images == 0 for r in report.rows):
        log.error("every evaluation cell failed")
        return EXIT_BACKEND
    return EXIT_OK


def cmd_cache(args, settings: dict) -> int:
    cache = ArtifactCache()
    if args.action == "clear":
        print(json.dumps({"removed": cache.clear(), "root": str(cache.root)}))
    else:
        print(json.dumps(cache.stats(), sort_keys=True))
    return EXIT_OK


COMMANDS = {"edit": cmd_edit, "inspect": cmd_inspect, "eval": cmd_eval, "cache": cmd_cache}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        settings = resolve_settings(args)
        return COMMANDS[args.command](args, settings)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InputError, UnsupportedInputError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (BackendError, EditFailed) as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except ValueError as exc:
        # configuration that parses but is inconsistent, e.g. K larger than the grid
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
