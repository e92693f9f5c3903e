"""Deterministic synthetic egocentric-style clip generator.

Each video contains one annotated target instance that appears twice (an
early appearance supplying the query crop and a later one forming the
ground-truth track), plus distractors sharing the target's shape kind and
unrelated filler objects. A bounded random-walk camera pan, per-frame
lighting jitter, and optional blur supply the visual variation. Everything
is a pure function of the seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import core
from .core import Box

SHAPE_KINDS = ("ellipse", "rectangle", "triangle", "ring")
PATTERNS = ("solid", "stripes")

# Palette of (name, rgb); targets draw from here, distractors perturb.
PALETTE = (
    ("red", (0.85, 0.15, 0.15)),
    ("green", (0.15, 0.75, 0.20)),
    ("blue", (0.20, 0.30, 0.90)),
    ("yellow", (0.90, 0.85, 0.15)),
    ("magenta", (0.80, 0.20, 0.80)),
    ("cyan", (0.15, 0.80, 0.80)),
    ("orange", (0.95, 0.55, 0.10)),
    ("white", (0.92, 0.92, 0.92)),
)

VISIBILITY_MIN_FRACTION = 0.25  # below this the object counts as absent
MAX_CAMERA_STEP_FRACTION = 0.05  # per-frame pan bound, fraction of width


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    num_videos: int = 10
    frames_per_video: int = 24
    resolution: Tuple[int, int] = (64, 64)  # (H, W)
    num_instances: int = 5
    distractors_per_target: int = 2
    blur_probability: float = 0.0
    lighting_jitter: float = 0.1
    distractor_margin: float = 0.25
    fps: float = 5.0

    def __post_init__(self):
        if self.num_videos < 1 or self.frames_per_video < 1 or self.num_instances < 1:
            raise ValueError("counts must be >= 1")
        if self.distractors_per_target < 0:
            raise ValueError("distractors_per_target must be >= 0")
        if self.num_instances < 1 + self.distractors_per_target:
            raise ValueError("num_instances must cover target plus distractors")
        for p in (self.blur_probability, self.lighting_jitter):
            if not (0.0 <= p <= 1.0):
                raise ValueError("probabilities must lie in [0, 1]")
        if self.frames_per_video < 12:
            raise ValueError("need >= 12 frames for a two-appearance timeline")
        if min(self.resolution) < 32:
            raise ValueError("resolution must be at least 32x32")


@dataclass(frozen=True)
class ObjectInstance:
    instance_id: int
    kind: str
    color: Tuple[float, float, float]
    pattern: str
    base_size: float
    aspect: float = 1.0


def mix_seed(global_seed: int, index: int) -> int:
    """Per-video 64-bit seed: splitmix64 finalizer over seed + index step."""
    z = (global_seed + (index + 1) * 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return z ^ (z >> 31)


def _shape_mask(obj: ObjectInstance, cx: float, cy: float, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    rx = obj.base_size / 2.0
    ry = rx * obj.aspect
    dx = xs - cx
    dy = ys - cy
    if obj.kind == "ellipse":
        return (dx / rx) ** 2 + (dy / ry) ** 2 <= 1.0
    if obj.kind == "rectangle":
        return (np.abs(dx) <= rx) & (np.abs(dy) <= ry)
    if obj.kind == "triangle":
        # apex at the top, base at the bottom
        frac = (dy + ry) / (2.0 * ry)
        return (np.abs(dy) <= ry) & (np.abs(dx) <= rx * np.clip(frac, 0.0, 1.0))
    if obj.kind == "ring":
        r2 = (dx / rx) ** 2 + (dy / ry) ** 2
        return (r2 <= 1.0) & (r2 >= 0.55**2)
    raise ValueError(f"unknown shape kind {obj.kind!r}")


def _paint(image: np.ndarray, mask: np.ndarray, obj: ObjectInstance, xs: np.ndarray) -> None:
    color = np.array(obj.color, dtype=np.float64)
    if obj.pattern == "stripes":
        stripe = ((np.floor(xs / 2.0).astype(np.int64) % 2) == 0)
        shade = np.where(stripe, 1.0, 0.6)
        for c in range(3):
            image[..., c][mask] = (color[c] * shade)[mask]
    else:
        image[mask] = color


def _box_blur3(image: np.ndarray) -> np.ndarray:
    padded = np.pad(image, ((1, 1), (1, 1), (0, 0)), mode="edge")
    out = np.zeros_like(image)
    for di in range(3):
        for dj in range(3):
            out += padded[di : di + image.shape[0], dj : dj + image.shape[1]]
    return out / 9.0


@dataclass
class Scene:
    """Fully materialized state of one synthetic video."""

    video_id: str
    spec: SceneSpec
    objects: List[ObjectInstance]
    positions: Dict[int, Tuple[float, float]]  # world coords per instance
    visibility: Dict[int, List[Tuple[int, int]]]  # half-open frame intervals
    camera_path: List[Tuple[float, float]]
    lighting: List[float]  # per-frame brightness factors
    blurred: List[bool]
    background: Tuple[float, float, float]
    target_id: int
    distractor_ids: List[int]
    crop_frame: int
    gt_interval: Tuple[int, int]  # scripted second appearance, half-open
    query_frame: int
    title: str

    def _visible(self, instance_id: int, t: int) -> bool:
        return any(a <= t < b for a, b in self.visibility[instance_id])

    def render_frame(self, t: int, camera: Optional[Tuple[float, float]] = None):
        """Render frame t; returns (image, {instance_id: bool mask})."""
        h, w = self.spec.resolution
        cam_x, cam_y = camera if camera is not None else self.camera_path[t]
        ys, xs = np.meshgrid(
            np.arange(h, dtype=np.float64) + 0.5,
            np.arange(w, dtype=np.float64) + 0.5,
            indexing="ij",
        )
        image = np.empty((h, w, 3), dtype=np.float64)
        image[...] = np.array(self.background)
        masks: Dict[int, np.ndarray] = {}
        for obj in self.objects:
            if not self._visible(obj.instance_id, t):
                continue
            wx, wy = self.positions[obj.instance_id]
            mask = _shape_mask(obj, wx - cam_x, wy - cam_y, xs, ys)
            if mask.any():
                # stripe phase in world coordinates so texture sticks to the object
                _paint(image, mask, obj, xs + cam_x)
            masks[obj.instance_id] = mask
        image = np.clip(image * self.lighting[t], 0.0, 1.0)
        if self.blurred[t]:
            image = _box_blur3(image)
        return image, masks

    def unclipped_area(self, instance_id: int, t: int) -> int:
        """Mask pixel count if the frame extended infinitely (same alignment)."""
        obj = next(o for o in self.objects if o.instance_id == instance_id)
        cam_x, cam_y = self.camera_path[t]
        wx, wy = self.positions[instance_id]
        cx, cy = wx - cam_x, wy - cam_y
        r = obj.base_size / 2.0 * max(1.0, obj.aspect) + 2.0
        x0, x1 = int(np.floor(cx - r)), int(np.ceil(cx + r))
        y0, y1 = int(np.floor(cy - r)), int(np.ceil(cy + r))
        ys, xs = np.meshgrid(
            np.arange(y0, y1, dtype=np.float64) + 0.5,
            np.arange(x0, x1, dtype=np.float64) + 0.5,
            indexing="ij",
        )
        return int(_shape_mask(obj, cx, cy, xs, ys).sum())


def mask_bbox(mask: np.ndarray) -> Optional[Box]:
    """Tight axis-aligned bound of a boolean mask, in pixel coordinates."""
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        return None
    return Box(float(xs.min()), float(ys.min()), float(xs.max() - xs.min() + 1), float(ys.max() - ys.min() + 1))


def _perturb_color(rng: np.random.Generator, color: Tuple[float, float, float], margin: float) -> Tuple[float, float, float]:
    out = []
    for c in color:
        sign = 1.0 if c < 0.5 else -1.0
        out.append(float(np.clip(c + sign * (margin + 0.1 * rng.random()), 0.0, 1.0)))
    return tuple(out)


def build_scene(spec: SceneSpec, video_index: int) -> Scene:
    rng = np.random.default_rng(mix_seed(spec.seed, video_index))
    h, w = spec.resolution
    t_total = spec.frames_per_video
    video_id = f"video_{video_index:04d}"

    # camera: bounded random walk around the origin
    max_step = MAX_CAMERA_STEP_FRACTION * w
    max_total = 0.10 * w
    cam = [(0.0, 0.0)]
    for _ in range(t_total - 1):
        dx = rng.uniform(-max_step, max_step)
        dy = rng.uniform(-max_step, max_step)
        px, py = cam[-1]
        cam.append(
            (float(np.clip(px + dx, -max_total, max_total)), float(np.clip(py + dy, -max_total, max_total)))
        )

    lighting = [float(1.0 + rng.uniform(-spec.lighting_jitter, spec.lighting_jitter)) for _ in range(t_total)]
    blurred = [bool(rng.random() < spec.blur_probability) for _ in range(t_total)]
    background = tuple(rng.uniform(0.03, 0.12, size=3).tolist())

    target_kind = SHAPE_KINDS[int(rng.integers(len(SHAPE_KINDS)))]
    palette_idx = int(rng.integers(len(PALETTE)))
    color_name, target_color = PALETTE[palette_idx]
    target_pattern = PATTERNS[int(rng.integers(len(PATTERNS)))]
    target_size = float(rng.uniform(10.0, 16.0))

    objects = [
        ObjectInstance(0, target_kind, target_color, target_pattern, target_size, float(rng.uniform(0.8, 1.2)))
    ]
    distractor_ids = []
    for d in range(spec.distractors_per_target):
        # same shape kind, color pushed away from the target by the margin
        objects.append(
            ObjectInstance(
                1 + d,
                target_kind,
                _perturb_color(rng, target_color, spec.distractor_margin),
                target_pattern,
                target_size * float(rng.uniform(0.9, 1.1)),
                float(rng.uniform(0.8, 1.2)),
            )
        )
        distractor_ids.append(1 + d)
    next_id = 1 + spec.distractors_per_target
    while len(objects) < spec.num_instances:
        kind = SHAPE_KINDS[int(rng.integers(len(SHAPE_KINDS)))]
        name, color = PALETTE[int(rng.integers(len(PALETTE)))]
        objects.append(
            ObjectInstance(
                next_id,
                kind,
                color,
                PATTERNS[int(rng.integers(len(PATTERNS)))],
                float(rng.uniform(8.0, 14.0)),
                float(rng.uniform(0.8, 1.2)),
            )
        )
        next_id += 1

    # placement: keep everything inside the camera-reachable safe region.
    # Every other object stays outside the template tracker's search radius
    # of the target, so the track stops cleanly when the target disappears
    # instead of latching onto a nearby look-alike.
    search_radius = 0.15 * w
    positions: Dict[int, Tuple[float, float]] = {}
    taken: List[Tuple[float, float, float]] = []
    for obj in objects:
        margin_px = max_total + obj.base_size / 2.0
        clearance = (
            search_radius + target_size / 2.0 + obj.base_size / 2.0 + 4.0
            if obj.instance_id != 0
            else 0.0
        )
        best = None
        best_score = -np.inf
        for _ in range(256):
            x = float(rng.uniform(margin_px, w - margin_px))
            y = float(rng.uniform(margin_px, h - margin_px))
            sep = min(
                (
                    ((x - tx) ** 2 + (y - ty) ** 2) ** 0.5
                    - (obj.base_size + ts) / 2.0
                    - 2.0
                    for tx, ty, ts in taken
                ),
                default=np.inf,
            )
            tx, ty, _ = taken[0] if taken else (x, y, 0.0)
            target_dist = ((x - tx) ** 2 + (y - ty) ** 2) ** 0.5
            score = min(sep, target_dist - clearance)
            if score > best_score:
                best_score, best = score, (x, y)
            if score >= 0.0:
                break
        positions[obj.instance_id] = best
        taken.append((best[0], best[1], obj.base_size))

    # timeline: early appearance (crop source), gap, final appearance
    # (ground-truth track), gap, query frame near the end
    a1 = int(rng.integers(0, 3))
    b1 = a1 + int(rng.integers(3, 6))
    a2 = b1 + int(rng.integers(2, 4))
    b2 = min(a2 + int(rng.integers(5, 9)), t_total - 3)
    query_frame = t_total - 1
    crop_frame = (a1 + b1) // 2

    visibility: Dict[int, List[Tuple[int, int]]] = {0: [(a1, b1), (a2, b2)]}
    for obj in objects[1:]:
        visibility[obj.instance_id] = [(0, t_total)]

    return Scene(
        video_id=video_id,
        spec=spec,
        objects=objects,
        positions=positions,
        visibility=visibility,
        camera_path=cam,
        lighting=lighting,
        blurred=blurred,
        background=background,
        target_id=0,
        distractor_ids=distractor_ids,
        crop_frame=crop_frame,
        gt_interval=(a2, b2),
        query_frame=query_frame,
        title=f"{color_name} {target_kind}",
    )


def render_scene(scene: Scene):
    """Render all frames; returns (clip, annotation record dict or None).

    The annotation is derived from rendered masks: a frame belongs to the
    track only if at least VISIBILITY_MIN_FRACTION of the target's
    unoccluded area is inside the frame.
    """
    spec = scene.spec
    frames = []
    track_boxes: Dict[int, Box] = {}
    for t in range(spec.frames_per_video):
        image, masks = scene.render_frame(t)
        frames.append(core.Frame(scene.video_id, t, image))
        tmask = masks.get(scene.target_id)
        if tmask is not None and tmask.any():
            full = scene.unclipped_area(scene.target_id, t)
            if full > 0 and tmask.sum() / full >= VISIBILITY_MIN_FRACTION:
                box = mask_bbox(tmask)
                if box is not None:
                    track_boxes[t] = box
    clip = core.VideoClip(scene.video_id, tuple(frames), spec.fps)

    # ground-truth track: the last contiguous visible run before the query frame
    a2, b2 = scene.gt_interval
    run = [t for t in range(a2, b2) if t in track_boxes]
    record = None
    crop_box = track_boxes.get(scene.crop_frame)
    if run and crop_box is not None:
        # keep the longest suffix of consecutive frames
        end = run[-1]
        start = end
        while start - 1 in track_boxes and start - 1 >= a2:
            start -= 1
        record = {
            "video_id": scene.video_id,
            "fps": spec.fps,
            "query": {
                "frame_idx": scene.query_frame,
                "crop_frame_idx": scene.crop_frame,
                "box": crop_box.as_list(),
                "title": scene.title,
            },
            "response_track": {
                "start": start,
                "boxes": [track_boxes[t].as_list() for t in range(start, end + 1)],
            },
        }
    return clip, record


def generate(spec: SceneSpec, out_path) -> Path:
    """Generate the full dataset in the standard layout; pure in the seed."""
    root = Path(out_path)
    clips = []
    records = []
    for v in range(spec.num_videos):
        scene = build_scene(spec, v)
        clip, record = render_scene(scene)
        if record is None:
            raise RuntimeError(f"{scene.video_id}: target never met the visibility rule")
        clips.append(clip)
        records.append(record)
    core.save_dataset(root, clips, records)
    (root / "spec.json").write_text(json.dumps(asdict(spec), indent=1, sort_keys=True) + "\n")
    return root
