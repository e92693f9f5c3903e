"""Shared visual backbone, blob proposals, and region feature pooling.

The backbone is a small strided convolutional stack (total stride 8) with
tanh activations; region features are bilinear crop-and-resize samples of
its spatial map, flattened through one affine layer to the shared feature
dimension. The same pathway serves frame proposals and the query crop.
"""

from __future__ import annotations

import hashlib
import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
from scipy import ndimage

from .core import Box, Frame

DEFAULT_FEATURE_DIM = 64
DEFAULT_GRID = 5
N_MAX = 16
BACKBONE_CHANNELS = 64
BACKBONE_STRIDE = 8
QUERY_CANVAS_SIZE = 64
QUERY_CANVAS_FILL = 0.08


@dataclass(frozen=True)
class Proposal:
    box: Box
    objectness: float

    def __post_init__(self):
        if not (0.0 <= self.objectness <= 1.0):
            raise ValueError(f"objectness {self.objectness} outside [0, 1]")


@dataclass(frozen=True)
class ProposalSet:
    frame_index: int
    proposals: Tuple[Proposal, ...]

    def __post_init__(self):
        if not self.proposals:
            raise ValueError("proposal set must contain at least one proposal")
        if len(self.proposals) > N_MAX:
            raise ValueError(f"proposal set exceeds N_max={N_MAX}")

    def boxes(self) -> List[Box]:
        return [p.box for p in self.proposals]


class Backbone(torch.nn.Module):
    def __init__(self, channels: int = BACKBONE_CHANNELS):
        super().__init__()
        self.conv1 = torch.nn.Conv2d(3, 16, 3, stride=2, padding=1)
        self.conv2 = torch.nn.Conv2d(16, 32, 3, stride=2, padding=1)
        self.conv3 = torch.nn.Conv2d(32, channels, 3, stride=2, padding=1)
        self.conv4 = torch.nn.Conv2d(channels, channels, 3, stride=1, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = torch.tanh(self.conv1(x))
        x = torch.tanh(self.conv2(x))
        x = torch.tanh(self.conv3(x))
        return torch.tanh(self.conv4(x))


def _bilinear_sample(fmap: torch.Tensor, px: torch.Tensor, py: torch.Tensor) -> torch.Tensor:
    """Sample fmap (C, H, W) at map coordinates (px, py), borders clamped."""
    _, h, w = fmap.shape
    px = px.clamp(0.0, w - 1.0)
    py = py.clamp(0.0, h - 1.0)
    x0 = px.floor().long().clamp(0, w - 2) if w > 1 else px.long() * 0
    y0 = py.floor().long().clamp(0, h - 2) if h > 1 else py.long() * 0
    x1 = (x0 + 1).clamp(0, w - 1)
    y1 = (y0 + 1).clamp(0, h - 1)
    fx = (px - x0.to(px.dtype)).clamp(0.0, 1.0)
    fy = (py - y0.to(py.dtype)).clamp(0.0, 1.0)
    v00 = fmap[:, y0, x0]
    v01 = fmap[:, y0, x1]
    v10 = fmap[:, y1, x0]
    v11 = fmap[:, y1, x1]
    top = v00 * (1 - fx) + v01 * fx
    bot = v10 * (1 - fx) + v11 * fx
    return top * (1 - fy) + bot * fy


class FeatureExtractor:
    """Backbone + pooling head with a per-frame feature-map cache.

    Weights are deterministically initialized from `seed` and are plain
    torch parameters (float64) so checkpoints can carry them.
    """

    def __init__(
        self,
        feature_dim: int = DEFAULT_FEATURE_DIM,
        grid_size: int = DEFAULT_GRID,
        seed: int = 0,
        cache_size: int = 8192,
    ):
        self.feature_dim = feature_dim
        self.grid_size = grid_size
        gen = torch.Generator().manual_seed(seed)
        self.backbone = Backbone().double()
        for p in self.backbone.parameters():
            with torch.no_grad():
                p.copy_(torch.empty_like(p).uniform_(-0.25, 0.25, generator=gen))
        for p in self.backbone.parameters():
            p.requires_grad_(False)
        self.pool_affine = torch.nn.Linear(BACKBONE_CHANNELS * grid_size * grid_size, feature_dim).double()
        with torch.no_grad():
            bound = 1.0 / math.sqrt(self.pool_affine.in_features)
            self.pool_affine.weight.copy_(
                torch.empty_like(self.pool_affine.weight).uniform_(-bound, bound, generator=gen)
            )
            self.pool_affine.bias.zero_()
        # the whole feature pathway is a fixed random projection: only the
        # scoring head is optimized, and the pooled geometry (which already
        # separates instances) is left untouched by training
        for p in self.pool_affine.parameters():
            p.requires_grad_(False)
        self._cache: "OrderedDict[Tuple[str, int], torch.Tensor]" = OrderedDict()
        self._cache_size = cache_size

    def named_parameters(self):
        for name, p in self.backbone.named_parameters():
            yield f"backbone.{name}", p
        for name, p in self.pool_affine.named_parameters():
            yield f"pool_affine.{name}", p

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def clear_cache(self) -> None:
        self._cache.clear()

    def _map_of(self, image: torch.Tensor) -> torch.Tensor:
        return self.backbone(image.unsqueeze(0))[0]

    def feature_map(self, frame: Frame) -> torch.Tensor:
        # key on pixel content: video ids are not unique across datasets
        key = hashlib.blake2b(frame.image.tobytes(), digest_size=16).digest()
        hit = self._cache.get(key)
        if hit is not None:
            self._cache.move_to_end(key)
            return hit
        image = torch.from_numpy(np.ascontiguousarray(frame.image.transpose(2, 0, 1)))
        with torch.no_grad():
            fmap = self._map_of(image)
        self._cache[key] = fmap
        if len(self._cache) > self._cache_size:
            self._cache.popitem(last=False)
        return fmap

    def _pool_map(self, fmap: torch.Tensor, boxes: Sequence[Box]) -> torch.Tensor:
        g = self.grid_size
        offsets = (torch.arange(g, dtype=torch.float64) + 0.5) / g
        cols = []
        for box in boxes:
            px = (box.x + offsets * box.w) / BACKBONE_STRIDE - 0.5
            py = (box.y + offsets * box.h) / BACKBONE_STRIDE - 0.5
            gx = px.repeat(g)
            gy = py.repeat_interleave(g)
            cols.append(_bilinear_sample(fmap, gx, gy).reshape(-1))
        stacked = torch.stack(cols)  # (len(boxes), C*G*G)
        return self.pool_affine(stacked)

    def pool_many(self, frame: Frame, boxes: Sequence[Box]) -> torch.Tensor:
        """Pooled features for several boxes of one frame; (len(boxes), C)."""
        if not boxes:
            raise ValueError("no boxes to pool")
        for box in boxes:
            if box.clipped(frame.width, frame.height) is None:
                raise ValueError(f"box {box} lies fully outside the frame")
        return self._pool_map(self.feature_map(frame), boxes)

    def pool(self, frame: Frame, box: Box) -> torch.Tensor:
        return self.pool_many(frame, [box])[0]

    def embed_region(self, image: np.ndarray) -> torch.Tensor:
        """Backbone feature of a standalone region (e.g. the query crop)."""
        if image.size == 0:
            raise ValueError("empty image region")
        t = torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1))).double()
        return self.embed_region_tensor(t)

    def canvas_inputs(self, image_chw: torch.Tensor) -> Tuple[torch.Tensor, Box]:
        """Feature map of the region pasted centered on a neutral canvas.

        Pooling the returned box from the returned map gives the region the
        same receptive-field statistics as an in-frame proposal, instead of
        the border-dominated features of a tiny standalone image.
        """
        _, h, w = image_chw.shape
        ch = max(QUERY_CANVAS_SIZE, h + 2 * BACKBONE_STRIDE)
        cw = max(QUERY_CANVAS_SIZE, w + 2 * BACKBONE_STRIDE)
        canvas = torch.full((3, ch, cw), QUERY_CANVAS_FILL, dtype=image_chw.dtype)
        y0, x0 = (ch - h) // 2, (cw - w) // 2
        canvas[:, y0 : y0 + h, x0 : x0 + w] = image_chw
        return self._map_of(canvas), Box(float(x0), float(y0), float(w), float(h))

    def embed_region_tensor(self, image_chw: torch.Tensor) -> torch.Tensor:
        """Differentiable variant taking a (3, H, W) tensor."""
        fmap, box = self.canvas_inputs(image_chw)
        return self._pool_map(fmap, [box])[0]


# ---------------------------------------------------------------------------
# Proposal generation
# ---------------------------------------------------------------------------

MIN_BLOB_AREA = 6
CONTRAST_THRESHOLD = 0.15
DEFAULT_JITTER = 0.2


def _full_frame_proposal(frame: Frame) -> Proposal:
    return Proposal(Box(0.0, 0.0, float(frame.width), float(frame.height)), 1.0)


def propose_heuristic(frame: Frame, n_max: int = N_MAX) -> List[Proposal]:
    """Blob proposals from a contrast map against the median background."""
    image = frame.image
    bg = np.median(image.reshape(-1, 3), axis=0)
    contrast = np.abs(image - bg).max(axis=2)
    binary = contrast > CONTRAST_THRESHOLD
    labels, count = ndimage.label(binary)
    cands: List[Proposal] = []
    for lbl in range(1, count + 1):
        mask = labels == lbl
        area = int(mask.sum())
        if area < MIN_BLOB_AREA:
            continue
        ys, xs = np.nonzero(mask)
        box = Box(float(xs.min()), float(ys.min()), float(xs.max() - xs.min() + 1), float(ys.max() - ys.min() + 1))
        saliency = float(np.clip(contrast[mask].mean(), 0.0, 1.0))
        cands.append(Proposal(box, saliency))
    if not cands:
        return [_full_frame_proposal(frame)]
    cands.sort(key=lambda p: (-p.objectness, p.box.x, p.box.y))
    return cands[:n_max]


def _random_box(rng: np.random.Generator, width: int, height: int) -> Box:
    w = float(rng.uniform(4.0, width / 2.0))
    h = float(rng.uniform(4.0, height / 2.0))
    x = float(rng.uniform(0.0, width - w))
    y = float(rng.uniform(0.0, height - h))
    return Box(x, y, w, h)


def propose_jittered_gt(
    frame: Frame,
    gt_boxes: Sequence[Box],
    rng: np.random.Generator,
    jitter: float = DEFAULT_JITTER,
    n_max: int = N_MAX,
) -> List[Proposal]:
    """GT boxes under uniform jitter, padded with random boxes to n_max."""
    out: List[Proposal] = []
    for box in gt_boxes:
        dx = float(rng.uniform(-jitter, jitter)) * box.w
        dy = float(rng.uniform(-jitter, jitter)) * box.h
        sw = 1.0 + float(rng.uniform(-jitter, jitter))
        sh = 1.0 + float(rng.uniform(-jitter, jitter))
        jittered = Box(box.x + dx, box.y + dy, box.w * sw, box.h * sh)
        clipped = jittered.clipped(frame.width, frame.height)
        out.append(Proposal(clipped if clipped is not None else box, 1.0))
    while len(out) < n_max:
        out.append(Proposal(_random_box(rng, frame.width, frame.height), float(rng.uniform(0.0, 0.5))))
    return out[:n_max]


def propose(frame: Frame, mode: str = "heuristic", **kwargs) -> List[Proposal]:
    if mode == "heuristic":
        return propose_heuristic(frame, **kwargs)
    if mode == "jittered_gt":
        return propose_jittered_gt(frame, **kwargs)
    raise ValueError(f"unknown proposal mode {mode!r}")
