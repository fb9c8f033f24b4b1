"""Per-sample optimization of the region generator and final candidate ranking.

The editor is a frozen, non-differentiable black box, so gradients reach
the logits through the relaxed selection only: each step minimizes
``sum_j w_j * loss_j`` where ``w = softmax(logits + gumbel)`` and the
per-proposal losses are constants. The forward choice is still the hard
``argmax(logits + gumbel)``, which is what gets logged and, in
``sampled-ema`` mode, the only proposal that is actually edited.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import torch

from .anchors import AnchorConfig, select_anchors
from .backends.base import BackendError, Backends, edit_image, extract_features
from .core import Anchor, BoxProposal, ImageBuffer, RegionMask, derive_seed, rasterize_mask
from .losses import LossBreakdown, LossContext, LossWeights, PromptSpec, QualityScore
from .regions import (
    ProposalConfig,
    RegionGenerator,
    SelectionSample,
    make_proposals,
    roi_pool,
    save_params,
    sample_gumbel_selection,
    select_from_noise,
    softmax,
    stack_pooled,
)

log = logging.getLogger(__name__)

GRADIENT_MODES = ("full-eval", "sampled-ema")

# seed-derivation tags
_TAG_GUMBEL = 1
_TAG_EDIT = 2
_TAG_INIT = 3
_TAG_INFER = 4


@dataclass(frozen=True)
class TrainConfig:
    k: int = 8
    m: int = 7
    l: int = 7
    epochs: int = 5
    learning_rate: float = 0.003
    batch_size: int = 1
    weights: LossWeights = field(default_factory=LossWeights)
    alpha: float = 2.0
    beta: float = 1.0
    gradient_mode: str = "full-eval"
    ema_decay: float = 0.9
    steps_per_epoch: int | None = None
    seed: int = 0
    scale_step: int = 1
    max_retries: int = 2
    jobs: int = 1

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not 0 < self.ema_decay < 1:
            raise ValueError("ema_decay must lie in (0, 1)")
        if self.gradient_mode not in GRADIENT_MODES:
            raise ValueError(f"gradient_mode must be one of {GRADIENT_MODES}")
        if self.batch_size != 1:
            raise ValueError("only batch_size=1 is supported")
        if self.k < 1 or self.m < 1 or self.l < 1:
            raise ValueError("k, m and l must be >= 1")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ValueError("steps_per_epoch must be >= 1")
        if self.max_retries < 0 or self.jobs < 1:
            raise ValueError("max_retries must be >= 0 and jobs >= 1")

    @property
    def steps(self) -> int:
        return self.steps_per_epoch if self.steps_per_epoch is not None else self.k

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "weights"}
        out["weights"] = {"clip": self.weights.clip, "structural": self.weights.structural,
                          "directional": self.weights.directional}
        return out


class LossTable:
    """Running (EMA) loss estimate per (anchor, proposal)."""

    def __init__(self, num_anchors: int, num_proposals: int, decay: float):
        self.decay = decay
        self.estimates = np.full((num_anchors, num_proposals), np.nan)
        self.counts = np.zeros((num_anchors, num_proposals), dtype=int)

    def update(self, anchor: int, j: int, value: float) -> None:
        i = j - 1
        if self.counts[anchor, i] == 0:
            self.estimates[anchor, i] = value
        else:
            self.estimates[anchor, i] = self.decay * self.estimates[anchor, i] + (1 - self.decay) * value
        self.counts[anchor, i] += 1

    def row(self, anchor: int, fresh: dict[int, float]) -> np.ndarray:
        """Loss vector for one step: fresh values where edited, EMA elsewhere.

        Proposals never visited fall back to the mean of the visited ones.
        """
        row = self.estimates[anchor].copy()
        for j, v in fresh.items():
            row[j - 1] = v
        visited = ~np.isnan(row)
        if not visited.any():
            raise ValueError("no loss estimate available for this anchor")
        row[~visited] = row[visited].mean()
        return row

    def to_dict(self) -> dict:
        return {"estimates": [[None if np.isnan(v) else float(v) for v in r] for r in self.estimates],
                "counts": self.counts.tolist()}


@dataclass
class Prepared:
    """Everything fixed for one (image, prompt): anchors, boxes, masks and pooled inputs."""

    image: ImageBuffer
    prompt: PromptSpec
    anchors: list[Anchor]
    proposals: list[list[BoxProposal]]
    masks: list[list[RegionMask]]
    inputs: list[torch.Tensor]
    attention: np.ndarray
    losses: LossContext


def prepare(image: ImageBuffer, prompt: PromptSpec, backends: Backends,
            config: TrainConfig) -> Prepared:
    features, attention = extract_features(backends.feature, image)
    grid = features.grid
    anchors = select_anchors(attention, AnchorConfig(config.k))
    pconf = ProposalConfig(config.m, config.scale_step)
    stride = backends.feature.patch_stride
    proposals, masks, inputs = [], [], []
    for anchor in anchors:
        boxes = make_proposals(anchor, pconf, grid)
        proposals.append(boxes)
        masks.append([rasterize_mask(b, stride, image.height, image.width, grid) for b in boxes])
        inputs.append(stack_pooled([roi_pool(features, b, config.l) for b in boxes], config.m))
    losses = LossContext(backends.scorer, image, prompt, config.weights, config.alpha, config.beta)
    return Prepared(image, prompt, anchors, proposals, masks, inputs, attention.data, losses)


def build_generator(feature_dim: int, config: TrainConfig) -> RegionGenerator:
    return RegionGenerator(feature_dim, config.m, config.l, seed=derive_seed(config.seed, _TAG_INIT))


def surrogate_logit_grad(weights, losses) -> np.ndarray:
    """d/d(logits) of sum_j w_j * loss_j with w = softmax(logits + g), losses constant."""
    w = np.asarray(weights, dtype=np.float64)
    losses = np.asarray(losses, dtype=np.float64)
    # w_j * sum_k w_k (l_j - l_k): same as w_j (l_j - w.l) when sum(w) = 1,
    # and exactly zero when all losses are equal
    return w * ((losses[:, None] - losses[None, :]) @ w)


def surrogate_objective(logits: torch.Tensor, gumbel, losses) -> torch.Tensor:
    """``sum_j softmax(logits + gumbel)_j * loss_j`` in float64, differentiable in ``logits``."""
    losses = torch.as_tensor(np.asarray(losses, dtype=np.float64))
    w = torch.softmax(logits.double() + torch.as_tensor(np.asarray(gumbel, dtype=np.float64)),
                      dim=-1)
    return torch.dot(w, losses)


def surrogate_step(net: RegionGenerator, optimizer: torch.optim.Optimizer, x: torch.Tensor,
                   selection: SelectionSample, losses,
                   logits: torch.Tensor | None = None) -> tuple[float, bool]:
    """One Adam step on ``sum_j w_j * loss_j``; returns (surrogate, applied).

    ``logits`` may carry an already-computed forward pass of ``x`` (with grad).
    """
    if logits is None:
        logits = net(x)
    surrogate = surrogate_objective(logits, selection.gumbel, losses)
    optimizer.zero_grad()
    surrogate.backward()
    # a sum is non-finite whenever any element is
    sums = [p.grad.sum() for p in net.parameters() if p.grad is not None]
    finite = bool(torch.isfinite(torch.stack(sums)).all()) if sums else True
    if finite:
        optimizer.step()
    else:
        optimizer.zero_grad()
    return float(surrogate.detach()), finite


class EditFailed(RuntimeError):
    pass


def _edit_with_retries(backends: Backends, image: ImageBuffer, mask: RegionMask, prompt: str,
                       seed: int, max_retries: int) -> ImageBuffer:
    attempt = 0
    while True:
        try:
            return edit_image(backends.editor, image, mask, prompt, seed)
        except BackendError as exc:
            if not exc.retryable or attempt >= max_retries:
                raise EditFailed(str(exc)) from exc
            attempt += 1
            log.warning("editor failed (%s), retry %d/%d", exc, attempt, max_retries)


def _evaluate(prep: Prepared, backends: Backends, anchor: int, indices: list[int], seed: int,
              config: TrainConfig) -> dict[int, LossBreakdown]:
    def one(j: int) -> LossBreakdown:
        edited = _edit_with_retries(backends, prep.image, prep.masks[anchor][j - 1],
                                    prep.prompt.prompt, seed, config.max_retries)
        return prep.losses.breakdown(edited)

    if config.jobs > 1 and not backends.serial_only and len(indices) > 1:
        with ThreadPoolExecutor(config.jobs) as pool:
            results = list(pool.map(one, indices))
    else:
        results = [one(j) for j in indices]
    return dict(zip(indices, results))


@dataclass
class TrainResult:
    params: RegionGenerator
    loss_table: LossTable
    log: list[dict]
    epoch_probabilities: list[np.ndarray]
    prepared: Prepared
    initial_blob: bytes


def proposal_probabilities(net: RegionGenerator, prep: Prepared) -> np.ndarray:
    """(K, M) noise-free softmax over proposals for every anchor."""
    with torch.no_grad():
        logits = net(torch.stack(prep.inputs)).double().numpy()
    return np.stack([softmax(row) for row in logits])


def train_region_generator(image: ImageBuffer, prompt: PromptSpec, backends: Backends,
                           config: TrainConfig = TrainConfig(),
                           prepared: Prepared | None = None) -> TrainResult:
    prep = prepared or prepare(image, prompt, backends, config)
    net = build_generator(backends.feature.feature_dim, config)
    initial_blob = save_params(net)
    optimizer = torch.optim.Adam(net.parameters(), lr=config.learning_rate, foreach=True)
    table = LossTable(len(prep.anchors), config.m, config.ema_decay)
    entries: list[dict] = []
    probabilities = [proposal_probabilities(net, prep)]
    applied = 0
    total_steps = 0
    step = 0
    for epoch in range(config.epochs):
        for s in range(config.steps):
            anchor = s % len(prep.anchors)
            x = prep.inputs[anchor]
            logits = net(x)
            selection = sample_gumbel_selection(logits.detach().double().numpy(),
                                                derive_seed(config.seed, _TAG_GUMBEL, anchor, step))
            edit_seed = derive_seed(config.seed, _TAG_EDIT, anchor, step)
            indices = (list(range(1, config.m + 1)) if config.gradient_mode == "full-eval"
                       else [selection.index])
            entry = {"epoch": epoch, "step": step, "anchor": anchor, "j_star": selection.index,
                     "soft_weights": [float(v) for v in selection.weights], "seed": edit_seed}
            total_steps += 1
            step += 1
            try:
                parts = _evaluate(prep, backends, anchor, indices, edit_seed, config)
            except EditFailed as exc:
                entry.update(status="skipped", reason=str(exc), loss_parts=None, surrogate=None)
                entries.append(entry)
                continue
            for j, b in parts.items():
                table.update(anchor, j, b.total)
            row = table.row(anchor, {j: b.total for j, b in parts.items()})
            surrogate, ok = surrogate_step(net, optimizer, x, selection, row, logits)
            entry.update(status="ok" if ok else "skipped-nonfinite",
                         loss_parts=parts[selection.index].to_dict(), surrogate=surrogate)
            applied += ok
            entries.append(entry)
        probabilities.append(proposal_probabilities(net, prep))
    if total_steps and not applied:
        raise EditFailed("every training step was skipped")
    return TrainResult(net, table, entries, probabilities, prep, initial_blob)


@dataclass
class EditCandidate:
    anchor_id: int
    box: BoxProposal
    mask: RegionMask
    edited: ImageBuffer
    loss: LossBreakdown
    score: QualityScore
    seed: int

    def to_dict(self) -> dict:
        return {"anchor_id": self.anchor_id, "box": self.box.to_dict(), "seed": self.seed,
                "loss": self.loss.to_dict(), "score": self.score.to_dict()}


def select_winner(candidates: list[EditCandidate]) -> EditCandidate:
    """Highest quality score; ties go to the lowest anchor index."""
    if not candidates:
        raise ValueError("no candidates")
    return min(candidates, key=lambda c: (-c.score.s, c.anchor_id))


def infer_best_edit(image: ImageBuffer, prompt: PromptSpec, params: RegionGenerator,
                    backends: Backends, config: TrainConfig = TrainConfig(),
                    prepared: Prepared | None = None) -> tuple[EditCandidate, list[EditCandidate]]:
    """Edit once per anchor with its most probable proposal and rank by quality score."""
    prep = prepared or prepare(image, prompt, backends, config)
    with torch.no_grad():
        logits = params(torch.stack(prep.inputs)).double().numpy()
    candidates = []
    for anchor, row in enumerate(logits):
        j = select_from_noise(row, np.zeros_like(row)).index
        seed = derive_seed(config.seed, _TAG_INFER, anchor)
        mask = prep.masks[anchor][j - 1]
        try:
            edited = _edit_with_retries(backends, prep.image, mask, prep.prompt.prompt, seed,
                                        config.max_retries)
        except EditFailed as exc:
            log.warning("anchor %d: %s", anchor, exc)
            continue
        candidates.append(EditCandidate(anchor, prep.proposals[anchor][j - 1], mask, edited,
                                        prep.losses.breakdown(edited), prep.losses.quality(edited),
                                        seed))
    if not candidates:
        raise EditFailed("editing failed for every anchor")
    return select_winner(candidates), candidates
