"""Domain types, box/track geometry, and the on-disk dataset model.

Boxes are continuous (x, y, w, h) with half-open extent [x, x+w) x [y, y+h).
A ResponseTrack starting at frame s with n boxes covers frames [s, s+n).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image


class DatasetError(Exception):
    """Raised when a dataset on disk violates the annotation contract."""


@dataclass(frozen=True)
class Box:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x, self.y, self.w, self.h)):
            raise ValueError(f"non-finite box: {self}")
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"degenerate box (w={self.w}, h={self.h})")

    @property
    def x2(self) -> float:
        return self.x + self.w

    @property
    def y2(self) -> float:
        return self.y + self.h

    @property
    def area(self) -> float:
        return self.w * self.h

    @property
    def center(self) -> Tuple[float, float]:
        return (self.x + self.w / 2.0, self.y + self.h / 2.0)

    def as_list(self) -> List[float]:
        return [self.x, self.y, self.w, self.h]

    def clipped(self, width: float, height: float) -> Optional["Box"]:
        """Intersect with the frame extent; None if nothing remains."""
        x1 = max(self.x, 0.0)
        y1 = max(self.y, 0.0)
        x2 = min(self.x2, width)
        y2 = min(self.y2, height)
        if x2 <= x1 or y2 <= y1:
            return None
        return Box(x1, y1, x2 - x1, y2 - y1)


@dataclass(frozen=True)
class Detection:
    box: Box
    confidence: float

    def __post_init__(self):
        if not (0.0 <= self.confidence <= 1.0):
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")


@dataclass(frozen=True)
class Frame:
    video_id: str
    index: int
    image: np.ndarray  # H x W x 3, floats in [0, 1]

    def __post_init__(self):
        if self.index < 0:
            raise ValueError("negative frame index")
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValueError(f"frame image must be HxWx3, got {self.image.shape}")

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]


@dataclass(frozen=True)
class VideoClip:
    video_id: str
    frames: Tuple[Frame, ...]
    fps: float

    def __post_init__(self):
        if self.fps <= 0:
            raise ValueError("fps must be positive")
        for i, f in enumerate(self.frames):
            if f.index != i:
                raise ValueError(
                    f"{self.video_id}: frame index {f.index} at position {i}"
                )

    def __len__(self) -> int:
        return len(self.frames)


@dataclass(frozen=True)
class VisualQuery:
    crop: np.ndarray  # H' x W' x 3, floats in [0, 1]
    query_frame: int
    title: Optional[str] = None

    def __post_init__(self):
        if self.crop.size == 0:
            raise ValueError("empty query crop")
        if self.query_frame < 0:
            raise ValueError("negative query frame")


@dataclass(frozen=True)
class ResponseTrack:
    start: int
    boxes: Tuple[Box, ...]

    def __post_init__(self):
        if not self.boxes:
            raise ValueError("empty response track")
        if self.start < 0:
            raise ValueError("negative track start")

    @property
    def end(self) -> int:
        """One past the last covered frame (half-open span)."""
        return self.start + len(self.boxes)

    @property
    def last_frame(self) -> int:
        return self.start + len(self.boxes) - 1

    def box_at(self, frame_idx: int) -> Optional[Box]:
        if self.start <= frame_idx < self.end:
            return self.boxes[frame_idx - self.start]
        return None


@dataclass(frozen=True)
class AnnotationRecord:
    video_id: str
    query: VisualQuery
    gt_track: ResponseTrack

    def __post_init__(self):
        if self.gt_track.end > self.query.query_frame:
            raise ValueError(
                f"{self.video_id}: track [{self.gt_track.start}, {self.gt_track.end})"
                f" does not end before query frame {self.query.query_frame}"
            )


@dataclass(frozen=True)
class ScoreTimeline:
    entries: Tuple[Tuple[int, Detection], ...]

    def __post_init__(self):
        indices = [i for i, _ in self.entries]
        if any(b <= a for a, b in zip(indices, indices[1:])):
            raise ValueError("timeline frame indices must strictly increase")

    def frames(self) -> List[int]:
        return [i for i, _ in self.entries]

    def scores(self) -> List[float]:
        return [d.confidence for _, d in self.entries]


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes; analytic on the half-open extents."""
    ix = min(a.x2, b.x2) - max(a.x, b.x)
    iy = min(a.y2, b.y2) - max(a.y, b.y)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def temporal_iou(p: ResponseTrack, g: ResponseTrack) -> float:
    """1D IoU of the half-open frame spans [start, end)."""
    inter = min(p.end, g.end) - max(p.start, g.start)
    if inter <= 0:
        return 0.0
    union = max(p.end, g.end) - min(p.start, g.start)
    return inter / union


def tube_iou(p: ResponseTrack, g: ResponseTrack) -> float:
    """Spatiotemporal overlap: summed per-frame intersection over summed union.

    Frames covered by only one track contribute that track's box area to the
    denominator only.
    """
    lo = min(p.start, g.start)
    hi = max(p.end, g.end)
    inter_sum = 0.0
    union_sum = 0.0
    for t in range(lo, hi):
        pb = p.box_at(t)
        gb = g.box_at(t)
        if pb is not None and gb is not None:
            ix = min(pb.x2, gb.x2) - max(pb.x, gb.x)
            iy = min(pb.y2, gb.y2) - max(pb.y, gb.y)
            inter = ix * iy if (ix > 0 and iy > 0) else 0.0
            inter_sum += inter
            union_sum += pb.area + gb.area - inter
        elif pb is not None:
            union_sum += pb.area
        elif gb is not None:
            union_sum += gb.area
    if union_sum == 0.0:
        return 0.0
    return inter_sum / union_sum


# ---------------------------------------------------------------------------
# Dataset on disk
#
# dataset/
#   videos/<video_id>/frames/%06d.png
#   annotations.json  -- list of {video_id, fps, query: {frame_idx, box, title?},
#                        response_track: {start, boxes}}
# ---------------------------------------------------------------------------

FRAME_NAME = "{:06d}.png"


def _load_frame_image(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def _save_frame_image(path: Path, image: np.ndarray) -> None:
    arr = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")


def _crop_image(image: np.ndarray, box: Box) -> np.ndarray:
    h, w = image.shape[:2]
    clipped = box.clipped(w, h)
    if clipped is None:
        raise DatasetError(f"query box {box} lies outside the frame")
    x1 = int(math.floor(clipped.x))
    y1 = int(math.floor(clipped.y))
    x2 = max(x1 + 1, int(math.ceil(clipped.x2)))
    y2 = max(y1 + 1, int(math.ceil(clipped.y2)))
    return image[y1:y2, x1:x2]


def load_clip(dataset_dir: Path, video_id: str, fps: float) -> VideoClip:
    frames_dir = Path(dataset_dir) / "videos" / video_id / "frames"
    if not frames_dir.is_dir():
        raise DatasetError(f"missing frames directory for video {video_id!r}")
    paths = sorted(frames_dir.glob("*.png"))
    if not paths:
        raise DatasetError(f"video {video_id!r} has no frames")
    frames = []
    for i, p in enumerate(paths):
        if p.name != FRAME_NAME.format(i):
            raise DatasetError(f"video {video_id!r}: unexpected frame file {p.name}")
        frames.append(Frame(video_id, i, _load_frame_image(p)))
    shapes = {f.image.shape for f in frames}
    if len(shapes) > 1:
        raise DatasetError(f"video {video_id!r}: inconsistent frame resolutions")
    return VideoClip(video_id, tuple(frames), fps)


def _parse_box(raw, where: str) -> Box:
    if not (isinstance(raw, (list, tuple)) and len(raw) == 4):
        raise DatasetError(f"{where}: box must be [x, y, w, h], got {raw!r}")
    try:
        return Box(*[float(v) for v in raw])
    except (TypeError, ValueError) as e:
        raise DatasetError(f"{where}: {e}") from e


def load_dataset(path) -> List[Tuple[VideoClip, List[AnnotationRecord]]]:
    """Load a dataset directory into clips with their annotation records.

    Output is ordered by video_id, records by their position in the
    annotation file. Any invariant violation is a DatasetError naming the
    offending record.
    """
    root = Path(path)
    ann_path = root / "annotations.json"
    if not ann_path.is_file():
        raise DatasetError(f"missing {ann_path}")
    try:
        raw_records = json.loads(ann_path.read_text())
    except json.JSONDecodeError as e:
        raise DatasetError(f"malformed annotations.json: {e}") from e
    if not isinstance(raw_records, list):
        raise DatasetError("annotations.json must contain a list of records")

    videos_dir = root / "videos"
    video_ids = sorted(p.name for p in videos_dir.iterdir()) if videos_dir.is_dir() else []

    by_video: Dict[str, List[dict]] = {vid: [] for vid in video_ids}
    fps_by_video: Dict[str, float] = {}
    for i, rec in enumerate(raw_records):
        where = f"annotation record {i}"
        vid = rec.get("video_id")
        if vid not in by_video:
            raise DatasetError(f"{where}: unknown video_id {vid!r}")
        fps = float(rec.get("fps", 0))
        if fps <= 0:
            raise DatasetError(f"{where}: invalid fps {fps}")
        prev = fps_by_video.setdefault(vid, fps)
        if prev != fps:
            raise DatasetError(f"{where}: fps disagrees with earlier record for {vid!r}")
        by_video[vid].append(rec)

    out = []
    for vid in video_ids:
        fps = fps_by_video.get(vid, 30.0)
        clip = load_clip(root, vid, fps)
        records = []
        for rec in by_video[vid]:
            where = f"video {vid!r}, query {len(records)}"
            q = rec.get("query", {})
            rt = rec.get("response_track", {})
            qframe = int(q.get("frame_idx", -1))
            if not (0 <= qframe < len(clip)):
                raise DatasetError(f"{where}: query frame {qframe} out of range")
            qbox = _parse_box(q.get("box"), where)
            crop_frame = int(q.get("crop_frame_idx", qframe))
            if not (0 <= crop_frame < len(clip)):
                raise DatasetError(f"{where}: crop frame {crop_frame} out of range")
            start = int(rt.get("start", -1))
            boxes = tuple(
                _parse_box(b, where) for b in rt.get("boxes", [])
            )
            if not boxes:
                raise DatasetError(f"{where}: empty response track")
            try:
                track = ResponseTrack(start, boxes)
            except ValueError as e:
                raise DatasetError(f"{where}: {e}") from e
            if track.end > len(clip):
                raise DatasetError(
                    f"{where}: track extends past clip ({track.end} > {len(clip)})"
                )
            crop = _crop_image(clip.frames[crop_frame].image, qbox)
            query = VisualQuery(crop, qframe, rec.get("query", {}).get("title"))
            try:
                records.append(AnnotationRecord(vid, query, track))
            except ValueError as e:
                raise DatasetError(f"{where}: {e}") from e
        out.append((clip, records))
    return out


def save_dataset(
    path,
    clips: Sequence[VideoClip],
    records_raw: Sequence[dict],
) -> None:
    """Write clips and raw annotation records in the standard layout."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    for clip in clips:
        frames_dir = root / "videos" / clip.video_id / "frames"
        frames_dir.mkdir(parents=True, exist_ok=True)
        for frame in clip.frames:
            _save_frame_image(frames_dir / FRAME_NAME.format(frame.index), frame.image)
    (root / "annotations.json").write_text(
        json.dumps(list(records_raw), indent=1, sort_keys=True) + "\n"
    )
