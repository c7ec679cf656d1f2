"""From annotated interaction video to (cropped object, contact points) pairs.

Stages: find the first hand-object contact frame, sample contact points from
the skin pixels inside the hand/object bbox intersection, pick the clearest
unobstructed frame nearby, chain per-frame homographies to carry the points
there, average + disk-resample, and crop to the object bbox.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _kernels
from .errors import (
    AllPointsOutOfBounds,
    AllPointsOutsideBbox,
    EmptyCrop,
    EmptyImage,
    NoContactFrame,
    NoIntersection,
    NoSkinPixels,
    ParseFailure,
)
from .geometry import Homography, compose, estimate_homography
from .tensorio import GroundTruthMask, RasterImage, load_image, load_mask

__all__ = [
    "Rect",
    "FrameDetection",
    "VideoSequence",
    "ContactPointSet",
    "ExtractionConfig",
    "find_contact_frame",
    "sample_contact_points",
    "laplacian_blur_score",
    "select_clear_frame",
    "estimate_homography",
    "Homography",
    "propagate_points",
    "finalize_contact_points",
    "crop_object",
    "skin_mask_from_rgb",
    "load_detections",
    "load_video_dir",
    "extract_record_from_video",
    "derive_seed",
]


def derive_seed(base: int, *tokens: str | int) -> int:
    """Stable per-item RNG seed derived from a base seed and context tokens."""
    h = hashlib.sha256(str(int(base)).encode())
    for t in tokens:
        h.update(b"|")
        h.update(str(t).encode())
    return int.from_bytes(h.digest()[:8], "little")


@dataclass(frozen=True)
class Rect:
    """Axis-aligned pixel rectangle covering columns x..x+w-1, rows y..y+h-1."""

    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        if self.w < 0 or self.h < 0:
            raise ValueError(f"negative rectangle extent: {self}")

    @property
    def area(self) -> int:
        return self.w * self.h

    def intersect(self, other: "Rect") -> "Rect | None":
        x0 = max(self.x, other.x)
        y0 = max(self.y, other.y)
        x1 = min(self.x + self.w, other.x + other.w)
        y1 = min(self.y + self.h, other.y + other.h)
        if x1 <= x0 or y1 <= y0:
            return None
        return Rect(x0, y0, x1 - x0, y1 - y0)

    def contains_point(self, x: float, y: float) -> bool:
        return self.x <= x < self.x + self.w and self.y <= y < self.y + self.h


@dataclass(frozen=True)
class FrameDetection:
    frame_index: int
    hand_bbox: Rect | None = None
    object_bbox: Rect | None = None
    in_contact: bool = False

    def __post_init__(self):
        if self.in_contact and (self.hand_bbox is None or self.object_bbox is None):
            raise ValueError(
                f"frame {self.frame_index}: contact requires both hand and object bboxes"
            )


@dataclass(frozen=True)
class VideoSequence:
    frames: list[RasterImage]
    detections: list[FrameDetection]
    video_id: str = ""

    def __post_init__(self):
        if len(self.frames) < 1:
            raise ValueError("video must contain at least one frame")
        if len(self.frames) != len(self.detections):
            raise ValueError(
                f"{len(self.frames)} frames but {len(self.detections)} detections"
            )

    def __len__(self) -> int:
        return len(self.frames)


@dataclass(frozen=True, eq=False)
class ContactPointSet:
    """(x, y) pixel coordinates; kept real-valued until final emission."""

    points: np.ndarray
    frame_index: int = 0

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        if len(pts) < 1:
            raise ValueError("contact point set must be non-empty")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return len(self.points)

    def centroid(self) -> tuple[float, float]:
        c = self.points.mean(axis=0)
        return float(c[0]), float(c[1])

    def rounded(self) -> np.ndarray:
        return np.floor(self.points + 0.5).astype(np.int64)


@dataclass(frozen=True)
class ExtractionConfig:
    window_half_width: int = 15
    sample_count: int = 5
    resample_radius: float = 4.0
    resample_count: int = 5
    rng_seed: int = 7
    bbox_local_homography: bool = False

    def __post_init__(self):
        if self.window_half_width < 0:
            raise ValueError("window_half_width must be >= 0")
        if self.sample_count < 1 or self.resample_count < 1:
            raise ValueError("sample counts must be >= 1")
        if self.resample_radius < 0:
            raise ValueError("resample_radius must be >= 0")


def find_contact_frame(v: VideoSequence) -> int:
    """Index of the first frame whose detection reports hand-object contact."""
    for det in v.detections:
        if det.in_contact:
            return det.frame_index
    raise NoContactFrame(f"video {v.video_id!r}: no frame is in contact")


def sample_contact_points(
    frame: RasterImage,
    det: FrameDetection,
    skin_mask: GroundTruthMask,
    cfg: ExtractionConfig,
) -> ContactPointSet:
    """Uniformly sample contact points from skin pixels inside bbox overlap.

    Sampling is with replacement and driven entirely by cfg.rng_seed.
    """
    if not det.in_contact:
        raise ValueError("detection is not a contact frame")
    if (skin_mask.height, skin_mask.width) != (frame.height, frame.width):
        raise ValueError("skin mask size does not match the frame")
    inter = det.hand_bbox.intersect(det.object_bbox)
    if inter is None:
        raise NoIntersection(f"frame {det.frame_index}: hand and object bboxes disjoint")
    sub = skin_mask.values[inter.y : inter.y + inter.h, inter.x : inter.x + inter.w]
    ys, xs = np.nonzero(sub > 0)
    if len(xs) == 0:
        raise NoSkinPixels(f"frame {det.frame_index}: no skin pixels in intersection")
    rng = np.random.default_rng(cfg.rng_seed)
    pick = rng.integers(0, len(xs), size=cfg.sample_count)
    pts = np.stack([xs[pick] + inter.x, ys[pick] + inter.y], axis=1).astype(np.float64)
    return ContactPointSet(pts, frame_index=det.frame_index)


def laplacian_blur_score(img: RasterImage | np.ndarray) -> float:
    """Variance of the 3x3 Laplacian response; higher means sharper."""
    if isinstance(img, RasterImage):
        gray = img.to_gray()
    else:
        gray = np.asarray(img, dtype=np.float64)
        if gray.ndim == 3:
            gray = 0.299 * gray[:, :, 0] + 0.587 * gray[:, :, 1] + 0.114 * gray[:, :, 2]
    if gray.size == 0:
        raise EmptyImage("cannot score an empty image")
    return _kernels.laplacian_variance(gray)


def _unobstructed(det: FrameDetection) -> bool:
    # "View intact" rule: no hand, or hand disjoint from the object bbox.
    if det.hand_bbox is None:
        return True
    if det.object_bbox is None:
        return True
    return det.hand_bbox.intersect(det.object_bbox) is None


def select_clear_frame(v: VideoSequence, j: int, cfg: ExtractionConfig) -> int:
    """Sharpest frame in the window around ``j``, preferring unobstructed ones.

    Falls back to the whole window when every frame is obstructed; ties go to
    the smallest index.
    """
    if not 0 <= j < len(v):
        raise ValueError(f"contact frame {j} outside video of length {len(v)}")
    lo = max(0, j - cfg.window_half_width)
    hi = min(len(v) - 1, j + cfg.window_half_width)
    window = list(range(lo, hi + 1))
    candidates = [i for i in window if _unobstructed(v.detections[i])]
    if not candidates:
        candidates = window
    scores = [laplacian_blur_score(v.frames[i]) for i in candidates]
    return candidates[int(np.argmax(scores))]


def propagate_points(
    p: ContactPointSet,
    chain: Sequence[Homography],
    bounds: tuple[int, int],
    frame_index: int | None = None,
) -> ContactPointSet:
    """Carry points through the composed homography chain, dropping any that
    land outside ``bounds`` (w, h). An empty chain is the identity."""
    w, h = bounds
    mapped = compose(chain).apply(p.points) if chain else p.points.copy()
    keep = (
        (mapped[:, 0] >= 0)
        & (mapped[:, 0] < w)
        & (mapped[:, 1] >= 0)
        & (mapped[:, 1] < h)
    )
    if not keep.any():
        raise AllPointsOutOfBounds("every propagated point left the frame")
    idx = p.frame_index if frame_index is None else frame_index
    return ContactPointSet(mapped[keep], frame_index=idx)


def _disk_offsets(radius: float) -> np.ndarray:
    r = int(np.floor(radius))
    dx, dy = np.meshgrid(np.arange(-r, r + 1), np.arange(-r, r + 1))
    keep = dx * dx + dy * dy <= radius * radius
    return np.stack([dx[keep], dy[keep]], axis=1)


def finalize_contact_points(
    p: ContactPointSet,
    cfg: ExtractionConfig,
    bounds: tuple[int, int],
) -> ContactPointSet:
    """Centroid + disk resampling: round the centroid to a pixel, then draw
    cfg.resample_count pixels uniformly (with replacement, seeded) from the
    integer disk of cfg.resample_radius around it, clamped to ``bounds``.

    Sampling at pixel resolution keeps every output within the radius even
    after rounding.
    """
    w, h = bounds
    cx, cy = p.centroid()
    center = np.floor(np.array([cx, cy]) + 0.5)
    offsets = _disk_offsets(cfg.resample_radius)
    rng = np.random.default_rng(cfg.rng_seed)
    pick = rng.integers(0, len(offsets), size=cfg.resample_count)
    pts = center[None, :] + offsets[pick]
    pts[:, 0] = np.clip(pts[:, 0], 0, w - 1)
    pts[:, 1] = np.clip(pts[:, 1], 0, h - 1)
    return ContactPointSet(pts.astype(np.float64), frame_index=p.frame_index)


def crop_object(
    frame: RasterImage,
    object_bbox: Rect,
    pts: ContactPointSet,
) -> tuple[RasterImage, ContactPointSet]:
    """Crop to the object bbox; re-express points in crop coordinates and drop
    the ones falling outside the bbox."""
    if object_bbox.w < 1 or object_bbox.h < 1:
        raise EmptyCrop(f"degenerate bbox {object_bbox}")
    if (
        object_bbox.x < 0
        or object_bbox.y < 0
        or object_bbox.x + object_bbox.w > frame.width
        or object_bbox.y + object_bbox.h > frame.height
    ):
        raise ValueError(f"bbox {object_bbox} exceeds frame {frame.size}")
    crop = RasterImage(
        frame.pixels[
            object_bbox.y : object_bbox.y + object_bbox.h,
            object_bbox.x : object_bbox.x + object_bbox.w,
        ].copy()
    )
    shifted = pts.points - np.array([object_bbox.x, object_bbox.y], dtype=np.float64)
    keep = (
        (shifted[:, 0] >= 0)
        & (shifted[:, 0] < object_bbox.w)
        & (shifted[:, 1] >= 0)
        & (shifted[:, 1] < object_bbox.h)
    )
    if not keep.any():
        raise AllPointsOutsideBbox("no contact point lies inside the object bbox")
    return crop, ContactPointSet(shifted[keep], frame_index=pts.frame_index)


def skin_mask_from_rgb(frame: RasterImage) -> GroundTruthMask:
    """Fallback skin segmentation: YCbCr box rule Cr in [133,173], Cb in [77,127]."""
    if frame.channels != 3:
        raise ValueError("skin thresholding needs an RGB frame")
    px = frame.pixels.astype(np.float64)
    r, g, b = px[:, :, 0], px[:, :, 1], px[:, :, 2]
    cb = 128.0 - 0.168736 * r - 0.331264 * g + 0.5 * b
    cr = 128.0 + 0.5 * r - 0.418688 * g - 0.081312 * b
    skin = (cr >= 133) & (cr <= 173) & (cb >= 77) & (cb <= 127)
    return GroundTruthMask((skin * np.uint8(255)).astype(np.uint8))


# --- on-disk video layout ---------------------------------------------------


def _bbox_from_json(v) -> Rect | None:
    if v is None:
        return None
    if not (isinstance(v, (list, tuple)) and len(v) == 4):
        raise ParseFailure(f"bbox must be [x,y,w,h] or null, got {v!r}")
    return Rect(int(v[0]), int(v[1]), int(v[2]), int(v[3]))


def load_detections(path: str | Path) -> list[FrameDetection]:
    """Parse a detections JSON-lines file, one object per frame."""
    out: list[FrameDetection] = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            det = FrameDetection(
                frame_index=int(obj["frame"]),
                hand_bbox=_bbox_from_json(obj.get("hand_bbox")),
                object_bbox=_bbox_from_json(obj.get("object_bbox")),
                in_contact=bool(obj.get("contact", False)),
            )
        except (KeyError, ValueError, json.JSONDecodeError) as e:
            raise ParseFailure(f"{path}:{lineno}: {e}") from e
        out.append(det)
    out.sort(key=lambda d: d.frame_index)
    return out


def load_video_dir(
    path: str | Path,
) -> tuple[VideoSequence, dict[int, GroundTruthMask], dict]:
    """Load one video directory.

    Expected layout: frames/*.png (sorted order = frame order),
    detections.jsonl, optional skin/*.png aligned with the frames, optional
    video.json with {"id", "category"}.
    """
    root = Path(path)
    frame_files = sorted((root / "frames").glob("*.png"))
    if not frame_files:
        raise ParseFailure(f"{root}: no frames/*.png found")
    frames = [load_image(f) for f in frame_files]
    detections = load_detections(root / "detections.jsonl")
    if len(detections) != len(frames):
        raise ParseFailure(
            f"{root}: {len(frames)} frames but {len(detections)} detection rows"
        )

    skins: dict[int, GroundTruthMask] = {}
    skin_files = sorted((root / "skin").glob("*.png")) if (root / "skin").is_dir() else []
    for i, f in enumerate(skin_files):
        if i < len(frames):
            skins[i] = load_mask(f)

    meta = {"id": root.name, "category": "unknown"}
    meta_file = root / "video.json"
    if meta_file.exists():
        try:
            meta.update(json.loads(meta_file.read_text()))
        except json.JSONDecodeError as e:
            raise ParseFailure(f"{meta_file}: {e}") from e

    seq = VideoSequence(frames=frames, detections=detections, video_id=str(meta["id"]))
    return seq, skins, meta


def _step_homography(
    seq: VideoSequence, a: int, b: int, cfg: ExtractionConfig, seed: int
) -> Homography:
    """Homography from frame a to adjacent frame b, optionally restricted to
    the neighborhood of the object bboxes."""
    from .geometry import match_corners

    if not cfg.bbox_local_homography:
        return estimate_homography(seq.frames[a], seq.frames[b], seed=seed)
    src_pts, dst_pts = match_corners(seq.frames[a], seq.frames[b])
    boxes = [seq.detections[i].object_bbox for i in (a, b)]
    margin = 20
    keep = np.ones(len(src_pts), dtype=bool)
    for pts, box in zip((src_pts, dst_pts), boxes):
        if box is None:
            continue
        keep &= (
            (pts[:, 0] >= box.x - margin)
            & (pts[:, 0] < box.x + box.w + margin)
            & (pts[:, 1] >= box.y - margin)
            & (pts[:, 1] < box.y + box.h + margin)
        )
    if keep.sum() < 4:
        keep[:] = True  # too few local matches: fall back to the full frame
    return estimate_homography(
        None, None, (src_pts[keep], dst_pts[keep]), seed=seed
    )


def extract_record_from_video(
    seq: VideoSequence,
    skins: dict[int, GroundTruthMask],
    cfg: ExtractionConfig,
) -> tuple[RasterImage, ContactPointSet, int]:
    """Full per-video pipeline: returns (object crop, contact points in crop
    coordinates, index of the clear frame the crop came from).

    Raises the stage-specific error when any step cannot produce a record.
    """
    j = find_contact_frame(seq)
    det_j = seq.detections[j]
    frame_j = seq.frames[j]
    skin = skins.get(j)
    if skin is None:
        skin = skin_mask_from_rgb(frame_j)
    pts = sample_contact_points(frame_j, det_j, skin, cfg)

    c = select_clear_frame(seq, j, cfg)
    det_c = seq.detections[c]
    if det_c.object_bbox is None:
        raise EmptyCrop(f"clear frame {c} has no object bbox to crop")

    chain: list[Homography] = []
    step = 1 if c >= j else -1
    for t in range(j, c, step):
        chain.append(_step_homography(seq, t, t + step, cfg, seed=cfg.rng_seed))
    frame_c = seq.frames[c]
    moved = propagate_points(pts, chain, (frame_c.width, frame_c.height), frame_index=c)
    finalized = finalize_contact_points(moved, cfg, (frame_c.width, frame_c.height))
    crop, crop_pts = crop_object(frame_c, det_c.object_bbox, finalized)
    return crop, crop_pts, c
