"""Video-level localization: frame scoring, peak picking, and tracking.

The pipeline scores sampled frames with a query-conditioned head, picks the
most recent confidence peak, and grows a response track around it with a
normalized cross-correlation template tracker run in both directions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Protocol, Tuple

import numpy as np
import torch

from . import features as features_mod
from .core import (
    AnnotationRecord,
    Box,
    Detection,
    Frame,
    ResponseTrack,
    ScoreTimeline,
    VideoClip,
    VisualQuery,
    iou,
)
from .heads import QueryConditionedHead, apply_deltas, embed_title

DETECTOR_TARGET_FPS = 5.0
TEMPLATE_CONTEXT = 1.5  # template patch size relative to the seed box


@dataclass(frozen=True)
class PeakConfig:
    window: int = 5
    threshold: float = 0.6
    stride: Optional[int] = None  # None: derived from clip fps / 5

    def __post_init__(self):
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError("smoothing window must be an odd integer >= 1")
        if not (0.0 <= self.threshold <= 1.0):
            raise ValueError("threshold must lie in [0, 1]")

    def stride_for(self, fps: float) -> int:
        if self.stride is not None:
            return max(1, self.stride)
        return max(1, round(fps / DETECTOR_TARGET_FPS))


@dataclass(frozen=True)
class TrackerConfig:
    similarity_threshold: float = 0.4
    template_update_rate: float = 0.1
    search_radius_fraction: float = 0.15
    max_track_length: int = 1000

    def __post_init__(self):
        if not (0.0 <= self.template_update_rate <= 1.0):
            raise ValueError("template update rate must lie in [0, 1]")
        if not (0.0 < self.search_radius_fraction <= 1.0):
            raise ValueError("search radius fraction must lie in (0, 1]")


class FrameScorer(Protocol):
    def score_frame(self, frame: Frame, query: VisualQuery) -> List[Detection]:
        """Ranked detections for one frame, best first."""


class HeadScorer:
    """Scores frames with a trained head over heuristic blob proposals."""

    def __init__(
        self,
        head: QueryConditionedHead,
        extractor: features_mod.FeatureExtractor,
    ):
        self.head = head
        self.extractor = extractor
        self._query_cache: dict = {}

    def _query_feature(self, query: VisualQuery):
        key = id(query)
        hit = self._query_cache.get(key)
        if hit is None:
            with torch.no_grad():
                q = self.extractor.embed_region(query.crop)
            title = None
            if self.head.config.use_text and query.title:
                title = torch.from_numpy(embed_title(query.title, self.head.config.cond_dim))
            hit = (q, title)
            self._query_cache[key] = hit
        return hit

    def score_frame(self, frame: Frame, query: VisualQuery) -> List[Detection]:
        proposals = features_mod.propose_heuristic(frame)
        boxes = [p.box for p in proposals]
        q, title = self._query_feature(query)
        with torch.no_grad():
            feats = self.extractor.pool_many(frame, boxes)
            out = self.head(q, feats, title_embed=title)
        if out.deltas is not None:
            boxes = apply_deltas(boxes, out.deltas, frame.width, frame.height)
        scores = out.scores.numpy()
        order = np.argsort(-scores, kind="stable")
        return [Detection(boxes[i], float(np.clip(scores[i], 0.0, 1.0))) for i in order]


class OracleScorer:
    """Reference scorer: confidence equals IoU with the ground-truth box."""

    def __init__(self, record: AnnotationRecord):
        self.record = record

    def score_frame(self, frame: Frame, query: VisualQuery) -> List[Detection]:
        proposals = features_mod.propose_heuristic(frame)
        gt = self.record.gt_track.box_at(frame.index)
        dets = [
            Detection(p.box, iou(p.box, gt) if gt is not None else 0.0)
            for p in proposals
        ]
        dets.sort(key=lambda d: -d.confidence)
        return dets


def score_video(
    clip: VideoClip,
    query: VisualQuery,
    scorer: FrameScorer,
    stride: int,
) -> ScoreTimeline:
    """Top-1 detection on every stride-th frame before the query frame."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    entries = []
    last = min(query.query_frame, len(clip))
    for t in range(0, max(last, 1), stride):
        dets = scorer.score_frame(clip.frames[t], query)
        if dets:
            entries.append((t, dets[0]))
    return ScoreTimeline(tuple(entries))


def smooth_scores(scores: List[float], window: int) -> List[float]:
    """Centered moving average, truncated at the edges."""
    k = window // 2
    n = len(scores)
    return [
        float(np.mean(scores[max(0, i - k) : min(n, i + k + 1)])) for i in range(n)
    ]


def most_recent_peak(timeline: ScoreTimeline, cfg: PeakConfig) -> Tuple[int, Detection]:
    """Latest smoothed local maximum above the threshold; global max fallback."""
    if not timeline.entries:
        raise ValueError("empty timeline")
    smoothed = smooth_scores(timeline.scores(), cfg.window)
    n = len(smoothed)

    def is_local_max(i: int) -> bool:
        left_ok = i == 0 or smoothed[i] >= smoothed[i - 1]
        right_ok = i == n - 1 or smoothed[i] >= smoothed[i + 1]
        return left_ok and right_ok

    for i in range(n - 1, -1, -1):
        if smoothed[i] >= cfg.threshold and is_local_max(i):
            return timeline.entries[i]
    # fallback on the raw scores: edge truncation biases the smoothed
    # average toward the ends, which would bury isolated peaks
    raw = timeline.scores()
    best = max(range(n), key=lambda i: (raw[i], i))
    return timeline.entries[best]


# ---------------------------------------------------------------------------
# NCC template tracker
# ---------------------------------------------------------------------------


def _extract_patch(image: np.ndarray, cx: float, cy: float, w: int, h: int) -> Optional[np.ndarray]:
    x0 = int(round(cx - w / 2.0))
    y0 = int(round(cy - h / 2.0))
    if x0 < 0 or y0 < 0 or x0 + w > image.shape[1] or y0 + h > image.shape[0]:
        return None
    return image[y0 : y0 + h, x0 : x0 + w]


def _ncc(a: np.ndarray, b: np.ndarray) -> float:
    # zero-mean per channel, so a uniformly colored patch carries no signal
    fa = (a - a.mean(axis=(0, 1), keepdims=True)).reshape(-1)
    fb = (b - b.mean(axis=(0, 1), keepdims=True)).reshape(-1)
    na = np.linalg.norm(fa)
    nb = np.linalg.norm(fb)
    if na < 1e-12 or nb < 1e-12:
        return 0.0
    return float(np.dot(fa, fb) / (na * nb))


def _search(
    image: np.ndarray, template: np.ndarray, cx: float, cy: float, radius: int
) -> Tuple[float, float, float]:
    """Best NCC match of template within radius of (cx, cy)."""
    h, w = template.shape[:2]
    best = (-2.0, cx, cy)
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            patch = _extract_patch(image, cx + dx, cy + dy, w, h)
            if patch is None:
                continue
            s = _ncc(template, patch)
            if s > best[0]:
                best = (s, cx + dx, cy + dy)
    return best


def track_bidirectional(
    clip: VideoClip,
    seed_frame: int,
    seed_box: Box,
    cfg: TrackerConfig,
    start_bound: int = 0,
    end_bound: Optional[int] = None,
) -> ResponseTrack:
    """Template-track outward from the seed; seed box is kept verbatim.

    Each direction stops when the best similarity drops below the threshold,
    at the clip/frame bounds, or at the per-direction length cap.
    """
    if end_bound is None:
        end_bound = len(clip) - 1
    if not (0 <= start_bound <= seed_frame <= end_bound < len(clip)):
        raise ValueError("seed frame outside the permitted range")
    frame0 = clip.frames[seed_frame]
    w = max(2, int(round(seed_box.w)))
    h = max(2, int(round(seed_box.h)))
    if seed_box.clipped(frame0.width, frame0.height) is None:
        raise ValueError("seed box lies outside the frame")
    radius = max(1, int(round(cfg.search_radius_fraction * frame0.width)))
    # template includes surrounding context so a uniformly colored object
    # still carries correlation signal against the background
    tw = min(frame0.width, int(round(w * TEMPLATE_CONTEXT)))
    th = min(frame0.height, int(round(h * TEMPLATE_CONTEXT)))

    def _clamped_patch(image: np.ndarray, cx: float, cy: float) -> np.ndarray:
        x0 = int(np.clip(round(cx - tw / 2.0), 0, image.shape[1] - tw))
        y0 = int(np.clip(round(cy - th / 2.0), 0, image.shape[0] - th))
        return image[y0 : y0 + th, x0 : x0 + tw]

    def run(direction: int) -> List[Tuple[int, Box]]:
        cx, cy = seed_box.center
        template = _clamped_patch(frame0.image, cx, cy).astype(np.float64).copy()
        out: List[Tuple[int, Box]] = []
        t = seed_frame + direction
        while start_bound <= t <= end_bound and len(out) < cfg.max_track_length:
            image = clip.frames[t].image
            sim, cx2, cy2 = _search(image, template, cx, cy, radius)
            if sim < cfg.similarity_threshold:
                break
            cx, cy = cx2, cy2
            box = Box(cx - w / 2.0, cy - h / 2.0, float(w), float(h))
            clipped = box.clipped(frame0.width, frame0.height)
            if clipped is None:
                break
            out.append((t, clipped))
            patch = _extract_patch(image, cx, cy, tw, th)
            if patch is not None:
                alpha = cfg.template_update_rate
                template = (1.0 - alpha) * template + alpha * patch
            t += direction
        return out

    backward = run(-1)
    forward = run(+1)
    entries = sorted(backward + [(seed_frame, seed_box)] + forward)
    start = entries[0][0]
    return ResponseTrack(start, tuple(b for _, b in entries))


@dataclass
class PipelineResult:
    track: ResponseTrack
    peak_frame: int
    peak_confidence: float
    timeline: ScoreTimeline


def vq2d_pipeline(
    clip: VideoClip,
    query: VisualQuery,
    scorer: FrameScorer,
    peak_cfg: PeakConfig = PeakConfig(),
    tracker_cfg: TrackerConfig = TrackerConfig(),
) -> PipelineResult:
    """score_video -> most_recent_peak -> track_bidirectional, truncated to
    end before the query frame."""
    stride = peak_cfg.stride_for(clip.fps)
    timeline = score_video(clip, query, scorer, stride)
    peak_frame, detection = most_recent_peak(timeline, peak_cfg)
    end_bound = min(len(clip) - 1, max(query.query_frame - 1, peak_frame))
    track = track_bidirectional(
        clip, peak_frame, detection.box, tracker_cfg, end_bound=end_bound
    )
    return PipelineResult(track, peak_frame, detection.confidence, timeline)
