"""Evaluation metrics: detection AP family and track-level VQ2D scores."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .core import (
    AnnotationRecord,
    Box,
    Detection,
    ResponseTrack,
    ScoreTimeline,
    iou,
    temporal_iou,
    tube_iou,
)

COCO_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
TRACK_IOU_THRESHOLD = 0.25
RECOVERY_IOU = 0.5


@dataclass(frozen=True)
class DetEvalResult:
    ap: float
    ap50: float
    ap75: float
    ar10: float

    def __post_init__(self):
        for v in (self.ap, self.ap50, self.ap75, self.ar10):
            if not (0.0 <= v <= 1.0):
                raise ValueError("detection metrics must lie in [0, 1]")


@dataclass(frozen=True)
class VQ2DEvalResult:
    tap25: float
    stap25: float
    rec_percent: float
    succ: float


def _average_precision(tp_flags: Sequence[bool], num_gt: int) -> float:
    """All-points interpolated AP from a ranked TP/FP sequence."""
    if num_gt == 0:
        raise ValueError("no ground truth to evaluate")
    if not tp_flags:
        return 0.0
    tp = np.cumsum([1.0 if f else 0.0 for f in tp_flags])
    fp = np.cumsum([0.0 if f else 1.0 for f in tp_flags])
    recall = tp / num_gt
    precision = tp / (tp + fp)
    # precision envelope, then sum over recall increments
    ap = 0.0
    prev_r = 0.0
    for i in range(len(tp_flags)):
        env = float(precision[i:].max())
        ap += (recall[i] - prev_r) * env
        prev_r = recall[i]
    return ap


def _match_frames(
    frames: Sequence[Tuple[Sequence[Detection], Box]],
    threshold: float,
    top_k: Optional[int] = None,
) -> List[bool]:
    """Pool detections across frames, rank by confidence, greedily match."""
    pooled = []
    for fi, (dets, gt) in enumerate(frames):
        use = list(dets)[:top_k] if top_k is not None else list(dets)
        for d in use:
            pooled.append((d.confidence, fi, d))
    pooled.sort(key=lambda t: -t[0])
    matched = [False] * len(frames)
    flags = []
    for conf, fi, det in pooled:
        gt = frames[fi][1]
        if not matched[fi] and iou(det.box, gt) >= threshold:
            matched[fi] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags


def detection_ap(
    frames: Sequence[Tuple[Sequence[Detection], Box]],
    thresholds: Sequence[float] = COCO_THRESHOLDS,
) -> DetEvalResult:
    """AP family over annotated positive frames (one GT box per frame).

    Matching is greedy in confidence order, one match per ground truth.
    The headline AP averages the thresholds; AR@10 averages recall with at
    most 10 detections kept per frame.
    """
    if not frames:
        raise ValueError("no annotated frames to evaluate")
    num_gt = len(frames)
    aps = {}
    recalls = []
    for thr in thresholds:
        aps[thr] = _average_precision(_match_frames(frames, thr), num_gt)
        flags10 = _match_frames(frames, thr, top_k=10)
        recalls.append(sum(flags10) / num_gt)
    return DetEvalResult(
        ap=float(np.mean([aps[t] for t in thresholds])),
        ap50=aps.get(0.5, _average_precision(_match_frames(frames, 0.5), num_gt)),
        ap75=aps.get(0.75, _average_precision(_match_frames(frames, 0.75), num_gt)),
        ar10=float(np.mean(recalls)),
    )


def vq2d_metrics(
    entries: Sequence[Tuple[Optional[Tuple[ResponseTrack, float]], ResponseTrack]],
) -> VQ2DEvalResult:
    """Track-level metrics over (prediction, ground truth) pairs per query.

    Predictions are ranked by their peak confidence for the AP metrics; a
    prediction is a true positive when its track overlaps its own query's
    ground truth at the 0.25 threshold (temporal IoU for tAP, spatiotemporal
    tube IoU for stAP).
    """
    if not entries:
        raise ValueError("no queries to evaluate")
    num_gt = len(entries)

    def ap_with(overlap) -> float:
        ranked = sorted(
            [(conf, qi, track) for qi, (pred, _) in enumerate(entries) if pred is not None
             for track, conf in [pred]],
            key=lambda t: -t[0],
        )
        flags = [overlap(track, entries[qi][1]) >= TRACK_IOU_THRESHOLD for _, qi, track in ranked]
        return _average_precision(flags, num_gt)

    succ_hits = 0
    recoveries = []
    for pred, gt in entries:
        if pred is None:
            recoveries.append(0.0)
            continue
        track, _ = pred
        if tube_iou(track, gt) > 0.0:
            succ_hits += 1
        hit = 0
        for t in range(gt.start, gt.end):
            pb = track.box_at(t)
            if pb is not None and iou(pb, gt.box_at(t)) >= RECOVERY_IOU:
                hit += 1
        recoveries.append(hit / len(gt.boxes))

    return VQ2DEvalResult(
        tap25=ap_with(temporal_iou),
        stap25=ap_with(tube_iou),
        rec_percent=100.0 * float(np.mean(recoveries)),
        succ=100.0 * succ_hits / num_gt,
    )


def fp_rate_on_negatives(
    timelines: Sequence[Tuple[ScoreTimeline, AnnotationRecord]],
    tau: float,
) -> float:
    """Fraction of sampled negative frames whose top score reaches tau.

    Negative frames are timeline entries strictly after the ground-truth
    track and before the query frame.
    """
    total = 0
    hot = 0
    for timeline, record in timelines:
        lo = record.gt_track.end
        hi = record.query.query_frame
        for frame_idx, det in timeline.entries:
            if lo <= frame_idx < hi:
                total += 1
                if det.confidence >= tau:
                    hot += 1
    if total == 0:
        return 0.0
    return hot / total
