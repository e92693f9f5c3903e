"""Training-stream samplers countering the dataset's frame and set biases.

Three mechanisms: balanced proposal sets (randomly dropping ground-truth
overlapping proposals so the target's presence is independent of the
frame), negative frame sampling from the interval after the target
disappears, and positive pseudo-pair generation by detecting and
bidirectionally tracking unlabeled objects.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import features as features_mod
from . import localize as localize_mod
from .core import AnnotationRecord, Box, Frame, ResponseTrack, VideoClip, VisualQuery, iou
from .features import Proposal, ProposalSet

OVERLAP_IOU = 0.5  # defines "overlapping with the ground truth"


@dataclass(frozen=True)
class TrainingPair:
    query: VisualQuery
    video_id: str
    frame_index: int
    gt_box: Optional[Box]
    provenance: str  # annotated | pufs | nufs

    def __post_init__(self):
        if self.provenance not in ("annotated", "pufs", "nufs"):
            raise ValueError(f"unknown provenance {self.provenance!r}")
        if (self.gt_box is not None) != (self.provenance in ("annotated", "pufs")):
            raise ValueError("gt_box present iff provenance is annotated or pufs")


@dataclass(frozen=True)
class SamplerConfig:
    bps_positive_prob: float = 0.5
    nufs_enabled: bool = False
    pufs_enabled: bool = False
    pufs_confidence_threshold: float = 0.5
    pufs_fps: float = 1.0
    pufs_area_range: Tuple[float, float] = (20.0, 1600.0)
    pufs_aspect_range: Tuple[float, float] = (0.33, 3.0)
    pufs_multiplier: float = 0.43
    pufs_max_pairs_per_instance: Optional[int] = 4
    proposal_mode: str = "mixed"  # for positive frames
    proposal_jitter: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.bps_positive_prob <= 1.0):
            raise ValueError("bps_positive_prob must lie in [0, 1]")
        if self.pufs_fps <= 0:
            raise ValueError("pufs_fps must be positive")
        if self.pufs_multiplier < 0:
            raise ValueError("pufs_multiplier must be >= 0")
        if self.proposal_mode not in ("jittered_gt", "heuristic", "mixed"):
            raise ValueError(f"unknown proposal mode {self.proposal_mode!r}")


def _contains_positive(pset: ProposalSet, gt_box: Box) -> bool:
    return any(iou(p.box, gt_box) >= OVERLAP_IOU for p in pset.proposals)


def _random_negative_box(
    rng: np.random.Generator, gt_box: Box, frame_w: float, frame_h: float
) -> Box:
    for _ in range(64):
        w = float(rng.uniform(4.0, frame_w / 2.0))
        h = float(rng.uniform(4.0, frame_h / 2.0))
        x = float(rng.uniform(0.0, frame_w - w))
        y = float(rng.uniform(0.0, frame_h - h))
        box = Box(x, y, w, h)
        if iou(box, gt_box) < OVERLAP_IOU:
            return box
    # tiny corner box cannot reach IoU 0.5 against any valid target
    return Box(0.0, 0.0, 2.0, 2.0)


def bps_sample(
    pset: ProposalSet,
    gt_box: Box,
    p: float,
    rng: np.random.Generator,
    frame_w: float,
    frame_h: float,
) -> Tuple[ProposalSet, bool]:
    """Keep the set with probability p; otherwise drop GT-overlapping
    proposals (padding with random non-overlapping boxes if that empties it).

    Returns the sampled set and whether it still contains a positive.
    """
    if rng.random() < p:
        return pset, _contains_positive(pset, gt_box)
    kept = [pr for pr in pset.proposals if iou(pr.box, gt_box) < OVERLAP_IOU]
    if not kept:
        kept = [
            Proposal(_random_negative_box(rng, gt_box, frame_w, frame_h), 0.0)
        ]
    return ProposalSet(pset.frame_index, tuple(kept)), False


def nufs_sample(
    clip: VideoClip, record: AnnotationRecord, rng: np.random.Generator
) -> List[TrainingPair]:
    """Negative frames from (track end, query frame], as many as positives."""
    lo = record.gt_track.end  # first frame after the track
    hi = record.query.query_frame  # inclusive
    available = list(range(lo, hi + 1))
    if not available:
        return []
    count = min(len(record.gt_track.boxes), len(available))
    chosen = sorted(rng.choice(len(available), size=count, replace=False).tolist())
    return [
        TrainingPair(record.query, clip.video_id, available[i], None, "nufs")
        for i in chosen
    ]


# ---------------------------------------------------------------------------
# P-UFS
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PufsInstance:
    video_id: str
    fps: float
    seed_frame: int
    seed_box: Box
    track: ResponseTrack


def _stable_seed(seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{seed}:{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def _in_ranges(box: Box, config: SamplerConfig) -> bool:
    amin, amax = config.pufs_area_range
    rmin, rmax = config.pufs_aspect_range
    return amin <= box.area <= amax and rmin <= (box.w / box.h) <= rmax


def _longest_run(frames: List[int]) -> List[int]:
    best: List[int] = []
    cur: List[int] = []
    for t in frames:
        if cur and t == cur[-1] + 1:
            cur.append(t)
        else:
            cur = [t]
        if len(cur) > len(best):
            best = cur
    return best


def discover_pufs_instances(
    clip: VideoClip,
    config: SamplerConfig,
    records: Sequence[AnnotationRecord] = (),
    tracker_cfg: Optional[localize_mod.TrackerConfig] = None,
) -> List[PufsInstance]:
    """Detect salient blobs at the sampling rate and track each in both
    directions; filter by area/aspect and drop anything already annotated."""
    if len(clip) < 2:
        return []
    if tracker_cfg is None:
        tracker_cfg = localize_mod.TrackerConfig(
            similarity_threshold=config.pufs_confidence_threshold
        )
    stride = max(1, round(clip.fps / config.pufs_fps))
    gt_boxes: Dict[int, List[Box]] = {}
    for rec in records:
        track = rec.gt_track
        for t in range(track.start, track.end):
            gt_boxes.setdefault(t, []).append(track.boxes[t - track.start])

    instances: List[PufsInstance] = []
    for t in range(0, len(clip), stride):
        for prop in features_mod.propose_heuristic(clip.frames[t]):
            if prop.objectness < config.pufs_confidence_threshold:
                continue
            if not _in_ranges(prop.box, config):
                continue
            if any(
                inst.track.box_at(t) is not None
                and iou(inst.track.box_at(t), prop.box) >= OVERLAP_IOU
                for inst in instances
            ):
                continue  # already discovered from an earlier seed
            track = localize_mod.track_bidirectional(clip, t, prop.box, tracker_cfg)
            kept = [
                tt
                for tt in range(track.start, track.end)
                if _in_ranges(track.box_at(tt), config)
            ]
            run = _longest_run(kept)
            if len(run) < 2:
                continue
            boxes = tuple(track.box_at(tt) for tt in run)
            filtered = ResponseTrack(run[0], boxes)
            overlaps_gt = any(
                filtered.box_at(tt) is not None
                and any(iou(filtered.box_at(tt), g) >= OVERLAP_IOU for g in gt_boxes.get(tt, []))
                for tt in range(filtered.start, filtered.end)
            )
            if overlaps_gt:
                continue
            instances.append(PufsInstance(clip.video_id, clip.fps, t, prop.box, filtered))
    return instances


def _crop(image: np.ndarray, box: Box) -> np.ndarray:
    x1 = int(np.floor(box.x))
    y1 = int(np.floor(box.y))
    x2 = max(x1 + 1, int(np.ceil(box.x2)))
    y2 = max(y1 + 1, int(np.ceil(box.y2)))
    return image[max(0, y1) : y2, max(0, x1) : x2]


def expand_pufs_pairs(
    clip: VideoClip,
    instances: Sequence[PufsInstance],
    config: SamplerConfig,
    rng: np.random.Generator,
) -> List[TrainingPair]:
    """Ordered (crop frame, target frame) pairs across each tracked instance."""
    pairs: List[TrainingPair] = []
    for inst in instances:
        frames = list(range(inst.track.start, inst.track.end))
        all_pairs = [(i, j) for i in frames for j in frames if i != j]
        if (
            config.pufs_max_pairs_per_instance is not None
            and len(all_pairs) > config.pufs_max_pairs_per_instance
        ):
            idx = rng.choice(
                len(all_pairs), size=config.pufs_max_pairs_per_instance, replace=False
            )
            all_pairs = [all_pairs[k] for k in sorted(idx.tolist())]
        for i, j in all_pairs:
            crop_box = inst.track.box_at(i)
            crop = _crop(clip.frames[i].image, crop_box)
            query = VisualQuery(crop, len(clip) - 1)
            pairs.append(
                TrainingPair(query, clip.video_id, j, inst.track.box_at(j), "pufs")
            )
    return pairs


def pufs_generate(
    clip: VideoClip,
    config: SamplerConfig,
    records: Sequence[AnnotationRecord] = (),
    tracker_cfg: Optional[localize_mod.TrackerConfig] = None,
) -> List[TrainingPair]:
    instances = discover_pufs_instances(clip, config, records, tracker_cfg)
    rng = np.random.default_rng(_stable_seed(config.seed, f"pufs:{clip.video_id}"))
    return expand_pufs_pairs(clip, instances, config, rng)


# ---------------------------------------------------------------------------
# Epoch assembly
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EpochEntry:
    pair: TrainingPair
    pset: ProposalSet
    exists_label: bool
    gt_box: Optional[Box]


def annotated_pairs(dataset) -> List[TrainingPair]:
    pairs = []
    for clip, records in dataset:
        for rec in records:
            track = rec.gt_track
            for t in range(track.start, track.end):
                pairs.append(
                    TrainingPair(rec.query, clip.video_id, t, track.boxes[t - track.start], "annotated")
                )
    return pairs


def build_epoch(
    dataset,
    config: SamplerConfig,
    epoch: int = 0,
    pufs_pairs: Optional[Sequence[TrainingPair]] = None,
) -> List[EpochEntry]:
    """Assemble one seeded, shuffled epoch of training entries.

    Positives get proposal sets in the configured mode with BPS applied;
    N-UFS frames contribute all-negative heuristic sets. P-UFS pairs are
    expected precomputed (they are expensive) and are capped at the
    configured multiplier of the annotated pair count.
    """
    dataset = list(dataset)
    if not dataset or not any(records for _, records in dataset):
        raise ValueError("empty dataset")
    clips = {clip.video_id: clip for clip, _ in dataset}
    rng = np.random.default_rng(_stable_seed(config.seed, f"epoch:{epoch}"))

    pairs = annotated_pairs(dataset)
    n_annotated = len(pairs)

    if config.nufs_enabled:
        for clip, records in dataset:
            for rec in records:
                pairs.extend(nufs_sample(clip, rec, rng))

    if config.pufs_enabled and pufs_pairs:
        budget = int(round(config.pufs_multiplier * n_annotated))
        pool = list(pufs_pairs)
        if len(pool) > budget:
            idx = rng.choice(len(pool), size=budget, replace=False)
            pool = [pool[k] for k in sorted(idx.tolist())]
        pairs.extend(pool)

    entries: List[EpochEntry] = []
    for pair in pairs:
        clip = clips[pair.video_id]
        frame = clip.frames[pair.frame_index]
        if pair.gt_box is not None:
            if config.proposal_mode == "jittered_gt":
                props = features_mod.propose_jittered_gt(
                    frame, [pair.gt_box], rng, jitter=config.proposal_jitter
                )
            elif config.proposal_mode == "mixed":
                # real frame proposals (the confusable objects) plus one
                # jittered GT box so a positive is always present pre-BPS
                jit = features_mod.propose_jittered_gt(
                    frame, [pair.gt_box], rng,
                    jitter=config.proposal_jitter, n_max=1,
                )
                props = (jit + features_mod.propose_heuristic(frame))[: features_mod.N_MAX]
            else:
                props = features_mod.propose_heuristic(frame)
            pset = ProposalSet(frame.index, tuple(props))
            pset, exists = bps_sample(
                pset, pair.gt_box, config.bps_positive_prob, rng, frame.width, frame.height
            )
            entries.append(EpochEntry(pair, pset, exists, pair.gt_box))
        else:
            props = features_mod.propose_heuristic(frame)
            pset = ProposalSet(frame.index, tuple(props))
            entries.append(EpochEntry(pair, pset, False, None))

    order = rng.permutation(len(entries))
    return [entries[i] for i in order]
