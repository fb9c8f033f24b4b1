"""Box proposals, ROI pooling, the region generation network and Gumbel selection."""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .core import Anchor, BoxProposal, FeatureMap

DEFAULT_NUM_PROPOSALS = 7
DEFAULT_POOL_SIZE = 7


@dataclass(frozen=True)
class ProposalConfig:
    m: int = DEFAULT_NUM_PROPOSALS
    scale_step: int = 1

    def __post_init__(self):
        if self.m < 1 or self.scale_step < 1:
            raise ValueError("m and scale_step must be >= 1")

    def check_grid(self, grid: tuple[int, int]) -> None:
        if self.m * self.scale_step > 2 * min(grid):
            raise ValueError(
                f"largest proposal ({self.m * self.scale_step} patches) exceeds twice the "
                f"grid side {min(grid)}")


def make_proposals(anchor: Anchor, config: ProposalConfig,
                   grid: tuple[int, int]) -> list[BoxProposal]:
    config.check_grid(grid)
    return [BoxProposal.centered(anchor, j, grid, config.scale_step)
            for j in range(1, config.m + 1)]


@dataclass(frozen=True, eq=False)
class PooledFeature:
    data: np.ndarray  # (d, l, l)
    size_index: int


def _sample_positions(lo: int, hi: int, l: int) -> np.ndarray:
    # box spans [lo, hi + 1) in grid units; sample at the l bin centres,
    # then shift into cell-centre coordinates (cell i is centred at i + 0.5)
    extent = hi + 1 - lo
    return lo + (np.arange(l) + 0.5) * extent / l - 0.5


def _bilinear_axis(pos: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    pos = np.clip(pos, 0.0, n - 1)
    i0 = np.floor(pos).astype(int)
    i1 = np.minimum(i0 + 1, n - 1)
    return i0, i1, pos - i0


def roi_pool(features: FeatureMap, box: BoxProposal, l: int = DEFAULT_POOL_SIZE) -> PooledFeature:
    """Bilinear (ROI-align style) resampling of ``box`` onto an l x l grid."""
    if l < 1:
        raise ValueError("l must be >= 1")
    d, h, w = features.data.shape
    if not box.fits((h, w)):
        raise ValueError(f"box {box.rect} outside grid {(h, w)}")
    r0, c0, r1, c1 = box.rect
    y0, y1, ty = _bilinear_axis(_sample_positions(r0, max(r1, r0), l), h)
    x0, x1, tx = _bilinear_axis(_sample_positions(c0, max(c1, c0), l), w)
    f = features.data
    ty = ty[:, None]
    tx = tx[None, :]
    top = f[:, y0][:, :, x0] * (1 - tx) + f[:, y0][:, :, x1] * tx
    bottom = f[:, y1][:, :, x0] * (1 - tx) + f[:, y1][:, :, x1] * tx
    return PooledFeature(top * (1 - ty) + bottom * ty, box.size_index)


class RegionGenerator(nn.Module):
    """Scores the M proposals of one anchor from their channel-stacked pooled features.

    conv(Md -> c1) -> ReLU -> conv(c1 -> c2) -> ReLU -> linear(c2*l*l -> hidden)
    -> ReLU -> linear(hidden -> M).
    """

    def __init__(self, feature_dim: int, num_proposals: int = DEFAULT_NUM_PROPOSALS,
                 pool_size: int = DEFAULT_POOL_SIZE, conv1_channels: int = 256,
                 conv2_channels: int = 128, hidden: int = 256, seed: int = 0):
        super().__init__()
        self.arch = {
            "feature_dim": feature_dim,
            "num_proposals": num_proposals,
            "pool_size": pool_size,
            "conv1_channels": conv1_channels,
            "conv2_channels": conv2_channels,
            "hidden": hidden,
        }
        self.seed = seed
        self.conv1 = nn.Conv2d(num_proposals * feature_dim, conv1_channels, 3, padding=1)
        self.conv2 = nn.Conv2d(conv1_channels, conv2_channels, 3, padding=1)
        self.linear1 = nn.Linear(conv2_channels * pool_size * pool_size, hidden)
        self.linear2 = nn.Linear(hidden, num_proposals)
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int) -> None:
        # uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)); the scoring layer starts at
        # zero so the initial proposal distribution is exactly uniform
        gen = torch.Generator().manual_seed(int(seed))
        with torch.no_grad():
            for layer in (self.conv1, self.conv2, self.linear1):
                bound = 1.0 / np.sqrt(layer.weight[0].numel())
                for p in (layer.weight, layer.bias):
                    p.copy_(torch.rand(p.shape, generator=gen, dtype=p.dtype) * 2 * bound - bound)
            self.linear2.weight.zero_()
            self.linear2.bias.zero_()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x.to(self.conv1.weight.dtype)
        squeeze = x.dim() == 3
        if squeeze:
            x = x[None]
        x = torch.relu(self.conv1(x))
        x = torch.relu(self.conv2(x))
        x = torch.relu(self.linear1(x.flatten(1)))
        x = self.linear2(x)
        return x[0] if squeeze else x

    @property
    def num_proposals(self) -> int:
        return self.arch["num_proposals"]

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy().copy() for k, v in self.state_dict().items()}


def stack_pooled(pooled: list[PooledFeature], num_proposals: int) -> torch.Tensor:
    """Concatenate pooled features along channels: (M*d, l, l)."""
    if len(pooled) != num_proposals:
        raise ValueError(f"expected {num_proposals} pooled features, got {len(pooled)}")
    shapes = {p.data.shape for p in pooled}
    if len(shapes) != 1:
        raise ValueError(f"pooled features disagree in shape: {sorted(shapes)}")
    return torch.from_numpy(np.concatenate([p.data for p in pooled], axis=0))


def rgn_forward(net: RegionGenerator, pooled: list[PooledFeature]) -> np.ndarray:
    x = stack_pooled(pooled, net.num_proposals)
    expected = net.arch["num_proposals"] * net.arch["feature_dim"]
    if x.shape[0] != expected or x.shape[1] != net.arch["pool_size"]:
        raise ValueError(f"input shape {tuple(x.shape)} does not fit architecture {net.arch}")
    with torch.no_grad():
        return net(x).double().numpy()


@dataclass(frozen=True, eq=False)
class SelectionSample:
    logits: np.ndarray
    gumbel: np.ndarray
    weights: np.ndarray
    index: int  # 1-based j*

    @property
    def hard(self) -> np.ndarray:
        onehot = np.zeros_like(self.weights)
        onehot[self.index - 1] = 1.0
        return onehot


def softmax(x: np.ndarray) -> np.ndarray:
    z = np.exp(x - np.max(x))
    return z / z.sum()


def gumbel_noise(u: np.ndarray) -> np.ndarray:
    return -np.log(-np.log(u))


def draw_uniform(rng: np.random.Generator, size: int) -> np.ndarray:
    u = rng.random(size)
    # resample exact 0 (and anything that would give infinite noise)
    bad = (u <= 0.0) | (u >= 1.0)
    while bad.any():
        u[bad] = rng.random(int(bad.sum()))
        bad = (u <= 0.0) | (u >= 1.0)
    return u


def select_from_noise(logits, gumbel) -> SelectionSample:
    logits = np.asarray(logits, dtype=np.float64)
    gumbel = np.asarray(gumbel, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise ValueError("logits must be finite")
    perturbed = logits + gumbel
    return SelectionSample(logits, gumbel, softmax(perturbed), int(np.argmax(perturbed)) + 1)


def sample_gumbel_selection(logits, rng_seed: int) -> SelectionSample:
    logits = np.asarray(logits, dtype=np.float64)
    rng = np.random.default_rng(rng_seed)
    return select_from_noise(logits, gumbel_noise(draw_uniform(rng, logits.shape[0])))


_MAGIC = b"RGNP\x01"


def save_params(net: RegionGenerator) -> bytes:
    """Single blob: magic, u32 header length, JSON header, raw little-endian float32 tensors."""
    arrays = net.state_arrays()
    tensors, offset, chunks = [], 0, []
    for name, arr in arrays.items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        tensors.append({"name": name, "shape": list(arr.shape), "dtype": "<f4",
                        "offset": offset, "nbytes": len(raw)})
        offset += len(raw)
        chunks.append(raw)
    header = json.dumps({"arch": net.arch, "seed": net.seed, "tensors": tensors},
                        sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    for chunk in chunks:
        buf.write(chunk)
    return buf.getvalue()


def load_params(blob: bytes) -> RegionGenerator:
    if not blob.startswith(_MAGIC):
        raise ValueError("not a region generator parameter blob")
    (n,) = struct.unpack("<I", blob[len(_MAGIC):len(_MAGIC) + 4])
    start = len(_MAGIC) + 4
    header = json.loads(blob[start:start + n])
    body = blob[start + n:]
    net = RegionGenerator(seed=header["seed"], **header["arch"])
    state = {}
    for t in header["tensors"]:
        arr = np.frombuffer(body[t["offset"]:t["offset"] + t["nbytes"]], dtype=t["dtype"])
        state[t["name"]] = torch.from_numpy(arr.reshape(t["shape"]).copy())
    net.load_state_dict(state)
    return net
