"""Loss, optimization loop, and checkpointing for the scoring heads.

SGD with momentum 0.9 and weight decay 1e-4 over the sampled training
stream, with a step-decay learning rate schedule. Checkpoints are zip
containers holding a JSON manifest plus little-endian IEEE-754 array
payloads; round trips are bit-exact.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from . import sampling as sampling_mod
from .core import Box, iou
from .features import FeatureExtractor, ProposalSet
from .heads import HeadConfig, HeadOutput, QueryConditionedHead, embed_title

CHECKPOINT_VERSION = "vqlab-checkpoint-1"
SCORE_EPS = 1e-7


class TrainingDiverged(RuntimeError):
    """Raised when the loss becomes non-finite."""


class CheckpointError(RuntimeError):
    """Raised on corrupt or incompatible checkpoint files."""


@dataclass(frozen=True)
class TrainConfig:
    head: HeadConfig = field(default_factory=HeadConfig)
    sampler: sampling_mod.SamplerConfig = field(default_factory=sampling_mod.SamplerConfig)
    learning_rate: float = 0.01
    decay_steps: Tuple[int, ...] = (2000, 4000)
    decay_factor: float = 0.1
    batch_size: int = 8
    total_steps: int = 5000
    seed: int = 0
    extractor_seed: int = 0
    cls_weight: float = 1.0
    box_weight: float = 1.0
    pos_weight_cap: float = 10.0
    momentum: float = 0.9
    weight_decay: float = 1e-4
    grad_clip_norm: float = 5.0  # 0 disables clipping
    deterministic: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.total_steps < 0:
            raise ValueError("rates and counts must be positive")
        if not (0.0 < self.decay_factor <= 1.0):
            raise ValueError("decay factor must lie in (0, 1]")

    def lr_at(self, step: int) -> float:
        lr = self.learning_rate
        for boundary in self.decay_steps:
            if step >= boundary:
                lr *= self.decay_factor
        return lr


def box_deltas(proposal: Box, gt: Box) -> torch.Tensor:
    """Regression target taking the proposal onto the ground-truth box."""
    pcx, pcy = proposal.center
    gcx, gcy = gt.center
    return torch.tensor(
        [
            (gcx - pcx) / proposal.w,
            (gcy - pcy) / proposal.h,
            np.log(gt.w / proposal.w),
            np.log(gt.h / proposal.h),
        ],
        dtype=torch.float64,
    )


def _smooth_l1(x: torch.Tensor) -> torch.Tensor:
    absx = x.abs()
    return torch.where(absx < 1.0, 0.5 * x * x, absx - 0.5)


def loss(
    output: HeadOutput,
    labels: Sequence[bool],
    gt_box: Optional[Box],
    pset: ProposalSet,
    cls_weight: float = 1.0,
    box_weight: float = 1.0,
    pos_weight_cap: float = 10.0,
) -> torch.Tensor:
    """Weighted BCE over proposals plus smooth-L1 refinement on positives."""
    scores = output.scores
    if len(labels) != scores.shape[0]:
        raise ValueError("label count must match score count")
    y = torch.tensor([1.0 if l else 0.0 for l in labels], dtype=torch.float64)
    n_pos = float(y.sum())
    n_neg = float(len(labels)) - n_pos
    pos_w = min(n_neg / n_pos, pos_weight_cap) if n_pos > 0 else 1.0
    weights = torch.where(y > 0, torch.tensor(pos_w, dtype=torch.float64), torch.tensor(1.0, dtype=torch.float64))
    s = scores.clamp(SCORE_EPS, 1.0 - SCORE_EPS)
    bce = -(y * torch.log(s) + (1.0 - y) * torch.log(1.0 - s))
    total = cls_weight * (weights * bce).mean()

    if output.deltas is not None and gt_box is not None and n_pos > 0:
        terms = []
        for j, positive in enumerate(labels):
            if not positive:
                continue
            target = box_deltas(pset.proposals[j].box, gt_box)
            terms.append(_smooth_l1(output.deltas[j] - target).sum())
        total = total + box_weight * torch.stack(terms).mean()
    return total


def proposal_labels(pset: ProposalSet, gt_box: Optional[Box]) -> List[bool]:
    if gt_box is None:
        return [False] * len(pset.proposals)
    return [iou(p.box, gt_box) >= sampling_mod.OVERLAP_IOU for p in pset.proposals]


@dataclass
class FitResult:
    head: QueryConditionedHead
    extractor: FeatureExtractor
    steps: int
    loss_history: List[Tuple[int, float]]


def fit(
    dataset,
    config: TrainConfig,
    extractor: Optional[FeatureExtractor] = None,
    pufs_pairs: Optional[Sequence[sampling_mod.TrainingPair]] = None,
    log_every: int = 100,
) -> FitResult:
    """Train a head (and the pooling affine) over the sampled stream."""
    if config.deterministic:
        torch.set_num_threads(1)
    dataset = list(dataset)
    clips = {clip.video_id: clip for clip, _ in dataset}
    if extractor is None:
        extractor = FeatureExtractor(
            feature_dim=config.head.feature_dim, seed=config.extractor_seed
        )
    head = QueryConditionedHead(config.head, seed=config.seed)
    params = [p for p in head.parameters() if p.requires_grad]
    params += [p for p in extractor.parameters() if p.requires_grad]
    optimizer = torch.optim.SGD(
        params,
        lr=config.learning_rate,
        momentum=config.momentum,
        weight_decay=config.weight_decay,
    )

    sampler_cfg = config.sampler
    if config.sampler.seed != config.seed:
        sampler_cfg = sampling_mod.SamplerConfig(**{**asdict(config.sampler), "seed": config.seed})

    if sampler_cfg.pufs_enabled and pufs_pairs is None:
        pufs_pairs = []
        for clip, records in dataset:
            pufs_pairs.extend(sampling_mod.pufs_generate(clip, sampler_cfg, records))

    query_maps: Dict[int, Tuple[torch.Tensor, Box]] = {}
    title_cache: Dict[str, torch.Tensor] = {}

    def query_feature(pair: sampling_mod.TrainingPair) -> torch.Tensor:
        key = id(pair.query)
        cached = query_maps.get(key)
        if cached is None:
            image = torch.from_numpy(
                np.ascontiguousarray(pair.query.crop.transpose(2, 0, 1))
            ).double()
            with torch.no_grad():
                cached = extractor.canvas_inputs(image)
            query_maps[key] = cached
        fmap, box = cached
        return extractor._pool_map(fmap, [box])[0]

    def title_feature(pair: sampling_mod.TrainingPair) -> Optional[torch.Tensor]:
        if not (config.head.use_text and pair.query.title):
            return None
        t = title_cache.get(pair.query.title)
        if t is None:
            t = torch.from_numpy(embed_title(pair.query.title, config.head.cond_dim))
            title_cache[pair.query.title] = t
        return t

    history: List[Tuple[int, float]] = []
    step = 0
    epoch = 0
    entries: List[sampling_mod.EpochEntry] = []
    cursor = 0
    while step < config.total_steps:
        batch = []
        while len(batch) < config.batch_size:
            if cursor >= len(entries):
                entries = sampling_mod.build_epoch(dataset, sampler_cfg, epoch, pufs_pairs)
                cursor = 0
                epoch += 1
            batch.append(entries[cursor])
            cursor += 1

        lr = config.lr_at(step)
        for group in optimizer.param_groups:
            group["lr"] = lr
        optimizer.zero_grad()
        total = torch.zeros((), dtype=torch.float64)
        for entry in batch:
            clip = clips[entry.pair.video_id]
            frame = clip.frames[entry.pair.frame_index]
            boxes = entry.pset.boxes()
            feats = extractor.pool_many(frame, boxes)
            q = query_feature(entry.pair)
            out = head(q, feats, title_embed=title_feature(entry.pair))
            labels = proposal_labels(entry.pset, entry.gt_box)
            total = total + loss(
                out,
                labels,
                entry.gt_box,
                entry.pset,
                cls_weight=config.cls_weight,
                # pseudo-labeled boxes come from a template tracker and are
                # too loose to supervise the refinement regressor
                box_weight=0.0 if entry.pair.provenance == "pufs" else config.box_weight,
                pos_weight_cap=config.pos_weight_cap,
            )
        total = total / len(batch)
        if not torch.isfinite(total):
            raise TrainingDiverged(f"non-finite loss at step {step}")
        total.backward()
        if config.grad_clip_norm > 0:
            torch.nn.utils.clip_grad_norm_(params, config.grad_clip_norm)
        optimizer.step()
        if step % log_every == 0 or step == config.total_steps - 1:
            history.append((step, float(total.detach())))
        step += 1

    return FitResult(head, extractor, step, history)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

_FIXED_DATE = (1980, 1, 1, 0, 0, 0)


def _named_arrays(head: QueryConditionedHead, extractor: FeatureExtractor):
    for name, p in head.named_parameters():
        yield f"head.{name}", p.detach().numpy()
    for name, p in extractor.named_parameters():
        yield f"extractor.{name}", p.detach().numpy()


def save_checkpoint(
    path,
    head: QueryConditionedHead,
    extractor: FeatureExtractor,
    step: int = 0,
    train_config: Optional[TrainConfig] = None,
    rng_state: Optional[dict] = None,
) -> None:
    arrays = list(_named_arrays(head, extractor))
    manifest = {
        "version": CHECKPOINT_VERSION,
        "step": step,
        "head_config": asdict(head.config),
        "extractor": {
            "feature_dim": extractor.feature_dim,
            "grid_size": extractor.grid_size,
        },
        "train_config": asdict(train_config) if train_config is not None else None,
        "rng_state": rng_state,
        "arrays": [
            {"name": name, "shape": list(a.shape), "dtype": str(a.dtype)}
            for name, a in arrays
        ],
    }
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_STORED) as zf:
        info = zipfile.ZipInfo("manifest.json", date_time=_FIXED_DATE)
        zf.writestr(info, json.dumps(manifest, indent=1, sort_keys=True))
        for name, a in arrays:
            info = zipfile.ZipInfo(f"arrays/{name}.bin", date_time=_FIXED_DATE)
            zf.writestr(info, np.ascontiguousarray(a).astype("<f8", copy=False).tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> Tuple[QueryConditionedHead, FeatureExtractor, dict]:
    """Rebuild the head and extractor; forward outputs match bit-exactly."""
    try:
        zf = zipfile.ZipFile(path)
    except (OSError, zipfile.BadZipFile) as e:
        raise CheckpointError(f"unreadable checkpoint {path}: {e}") from e
    with zf:
        try:
            manifest = json.loads(zf.read("manifest.json"))
        except (KeyError, json.JSONDecodeError) as e:
            raise CheckpointError(f"corrupt manifest in {path}: {e}") from e
        version = manifest.get("version")
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"checkpoint version {version!r} incompatible with {CHECKPOINT_VERSION!r}"
            )
        head = QueryConditionedHead(HeadConfig(**manifest["head_config"]))
        extractor = FeatureExtractor(**manifest["extractor"])
        params = dict(head.named_parameters())
        params = {f"head.{k}": v for k, v in params.items()}
        params.update({f"extractor.{k}": v for k, v in dict(extractor.named_parameters()).items()})
        for spec in manifest["arrays"]:
            name = spec["name"]
            if name not in params:
                raise CheckpointError(f"unknown array {name!r} in {path}")
            try:
                raw = zf.read(f"arrays/{name}.bin")
            except (KeyError, zipfile.BadZipFile) as e:
                raise CheckpointError(f"corrupt array {name!r} in {path}: {e}") from e
            try:
                arr = np.frombuffer(raw, dtype="<f8").reshape(spec["shape"])
            except ValueError as e:
                raise CheckpointError(f"array {name!r} has wrong size in {path}") from e
            with torch.no_grad():
                params[name].copy_(torch.from_numpy(arr.copy()))
    return head, extractor, manifest
