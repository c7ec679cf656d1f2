"""Synthetic desk-scale corpus generator.

Produces everything the pipeline stages consume, with no external data:

* interaction videos (panning camera over a textured scene, a skin-colored
  hand touching the object for two frames, motion blur on the frames that
  should lose the clear-frame vote) plus detections and skin masks;
* an evaluation dataset whose targets are the object crops the extraction
  stage will produce (and dihedral-transformed copies), with disc-shaped
  ground-truth masks centered on the extracted contact centroid;
* a depth image, camera intrinsics and a grasp candidate file.

Everything is seeded; the same seed always yields byte-identical files.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .correspondence import DihedralTransform
from .extraction import (
    ContactPointSet,
    ExtractionConfig,
    FrameDetection,
    Rect,
    VideoSequence,
    derive_seed,
    extract_record_from_video,
)
from .tensorio import (
    CameraIntrinsics,
    GroundTruthMask,
    RasterImage,
    save_depth,
    save_image,
    save_intrinsics,
    save_mask,
)

WORLD_W, WORLD_H = 200, 150
FRAME_W, FRAME_H = 160, 120
N_FRAMES = 6
CONTACT_FRAMES = (2, 3)
CLEAR_FRAME = 4
PAN_STEP = (3, 2)
VIEW_ORIGIN = (10, 8)
MASK_RADIUS = 14
HAND_COLOR = (202, 140, 110)  # satisfies the YCbCr skin box
CATEGORIES = ("bottle", "mug", "pan", "board")
_TARGET_TRANSFORMS = ("r90", "r180", "r270", "r0f", "r90f", "r180f", "r270f")


def _value_noise(rng: np.random.Generator, h: int, w: int, scale: int) -> np.ndarray:
    """Smooth noise in [0, 1] from a bilinearly upsampled random grid."""
    gh, gw = h // scale + 2, w // scale + 2
    grid = rng.random((gh, gw))
    ys = np.arange(h) / scale
    xs = np.arange(w) / scale
    y0 = ys.astype(int)
    x0 = xs.astype(int)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = grid[np.ix_(y0, x0)] * (1 - fx) + grid[np.ix_(y0, x0 + 1)] * fx
    bot = grid[np.ix_(y0 + 1, x0)] * (1 - fx) + grid[np.ix_(y0 + 1, x0 + 1)] * fx
    return top * (1 - fy) + bot * fy


def _object_mask(category: str, box: Rect, h: int, w: int) -> np.ndarray:
    """Boolean world mask of the object silhouette inside ``box``."""
    yy, xx = np.mgrid[0:h, 0:w]
    cx, cy = box.x + box.w / 2, box.y + box.h / 2
    rect = (xx >= box.x) & (xx < box.x + box.w) & (yy >= box.y) & (yy < box.y + box.h)
    if category == "mug":
        return ((xx - cx) / (box.w / 2)) ** 2 + ((yy - cy) / (box.h / 2)) ** 2 <= 1.0
    if category == "pan":
        body = ((xx - cx) / (box.w / 2.6)) ** 2 + ((yy - cy) / (box.h / 2)) ** 2 <= 1.0
        handle = (
            (xx >= box.x)
            & (xx < box.x + box.w // 3)
            & (np.abs(yy - cy) <= box.h // 8)
        )
        return body | handle
    if category == "board":
        notch = (xx < box.x + 14) & (yy < box.y + 14)
        return rect & ~notch
    return rect  # bottle: plain rectangle


def _box_blur3(img: np.ndarray) -> np.ndarray:
    """3x3 box blur with edge replication, per channel."""
    p = np.pad(img.astype(np.float64), ((1, 1), (1, 1), (0, 0)), mode="edge")
    acc = np.zeros_like(img, dtype=np.float64)
    for dy in range(3):
        for dx in range(3):
            acc += p[dy : dy + img.shape[0], dx : dx + img.shape[1]]
    return np.clip(acc / 9.0 + 0.5, 0, 255).astype(np.uint8)


@dataclass
class _VideoSpec:
    video_id: str
    category: str
    seed: int


def _ellipse_mask(h: int, w: int, cx: float, cy: float, rx: float, ry: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    return ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0


def _synth_video(spec: _VideoSpec) -> tuple[VideoSequence, dict[int, GroundTruthMask]]:
    rng = np.random.default_rng(spec.seed)

    # Static world: textured background + textured object silhouette.
    bg = np.stack(
        [_value_noise(rng, WORLD_H, WORLD_W, 7) for _ in range(3)], axis=2
    )
    fine = _value_noise(rng, WORLD_H, WORLD_W, 2)[:, :, None]
    world = np.clip(50 + 110 * bg + 50 * (fine - 0.5), 0, 255).astype(np.uint8)
    # High-contrast clutter so the corner matcher has plenty to lock onto.
    for _ in range(70):
        sw, sh = rng.integers(3, 9, size=2)
        sx = int(rng.integers(0, WORLD_W - sw))
        sy = int(rng.integers(0, WORLD_H - sh))
        color = rng.integers(0, 256, size=3)
        world[sy : sy + sh, sx : sx + sw] = color
    obj_box = Rect(
        50 + int(rng.integers(0, 8)), 35 + int(rng.integers(0, 6)), 80, 60
    )
    silhouette = _object_mask(spec.category, obj_box, WORLD_H, WORLD_W)
    base = np.array(
        {
            "bottle": (70, 110, 190),
            "mug": (190, 90, 70),
            "pan": (90, 90, 100),
            "board": (170, 140, 80),
        }[spec.category],
        dtype=np.float64,
    )
    texture = _value_noise(rng, WORLD_H, WORLD_W, 5)
    grain = _value_noise(rng, WORLD_H, WORLD_W, 2)
    obj_px = np.clip(
        base[None, None, :]
        + 70 * (texture[:, :, None] - 0.5)
        + 50 * (grain[:, :, None] - 0.5),
        0,
        255,
    )
    world = np.where(silhouette[:, :, None], obj_px.astype(np.uint8), world)

    # Hand: skin-colored ellipse over the grasp site, static w.r.t. the world.
    grip = (obj_box.x + 14, obj_box.y + obj_box.h // 2)
    hand_rx, hand_ry = 10, 8
    hand = _ellipse_mask(WORLD_H, WORLD_W, grip[0], grip[1], hand_rx, hand_ry)
    shade = 1.0 + 0.12 * (_value_noise(rng, WORLD_H, WORLD_W, 4) - 0.5)
    hand_px = np.clip(np.array(HAND_COLOR)[None, None, :] * shade[:, :, None], 0, 255)
    world_hand = np.where(hand[:, :, None], hand_px.astype(np.uint8), world)
    hand_box_world = Rect(grip[0] - hand_rx, grip[1] - hand_ry, 2 * hand_rx + 1, 2 * hand_ry + 1)

    frames: list[RasterImage] = []
    detections: list[FrameDetection] = []
    skins: dict[int, GroundTruthMask] = {}
    for t in range(N_FRAMES):
        ox = VIEW_ORIGIN[0] + PAN_STEP[0] * t
        oy = VIEW_ORIGIN[1] + PAN_STEP[1] * t
        scene = world_hand if t in CONTACT_FRAMES else world
        view = scene[oy : oy + FRAME_H, ox : ox + FRAME_W].copy()
        if t != CLEAR_FRAME and t not in CONTACT_FRAMES:
            view = _box_blur3(view)
        frames.append(RasterImage(view))

        obj = Rect(obj_box.x - ox, obj_box.y - oy, obj_box.w, obj_box.h)
        if t in CONTACT_FRAMES:
            hand_r = Rect(
                hand_box_world.x - ox, hand_box_world.y - oy,
                hand_box_world.w, hand_box_world.h,
            )
            detections.append(
                FrameDetection(t, hand_bbox=hand_r, object_bbox=obj, in_contact=True)
            )
            skin_view = hand[oy : oy + FRAME_H, ox : ox + FRAME_W]
            skins[t] = GroundTruthMask((skin_view * np.uint8(255)).astype(np.uint8))
        else:
            detections.append(FrameDetection(t, hand_bbox=None, object_bbox=obj))
            skins[t] = GroundTruthMask(np.zeros((FRAME_H, FRAME_W), dtype=np.uint8))

    return VideoSequence(frames, detections, video_id=spec.video_id), skins


def _write_video(
    root: Path, spec: _VideoSpec, seq: VideoSequence, skins: dict[int, GroundTruthMask]
) -> None:
    vdir = root / spec.video_id
    (vdir / "frames").mkdir(parents=True, exist_ok=True)
    (vdir / "skin").mkdir(parents=True, exist_ok=True)
    lines = []
    for t, (frame, det) in enumerate(zip(seq.frames, seq.detections)):
        save_image(frame, vdir / "frames" / f"frame_{t:04d}.png")
        save_mask(skins[t], vdir / "skin" / f"skin_{t:04d}.png")
        lines.append(
            json.dumps(
                {
                    "frame": t,
                    "hand_bbox": (
                        [det.hand_bbox.x, det.hand_bbox.y, det.hand_bbox.w, det.hand_bbox.h]
                        if det.hand_bbox
                        else None
                    ),
                    "object_bbox": (
                        [
                            det.object_bbox.x,
                            det.object_bbox.y,
                            det.object_bbox.w,
                            det.object_bbox.h,
                        ]
                        if det.object_bbox
                        else None
                    ),
                    "contact": det.in_contact,
                }
            )
        )
    (vdir / "detections.jsonl").write_text("\n".join(lines) + "\n")
    (vdir / "video.json").write_text(
        json.dumps({"id": spec.video_id, "category": spec.category}) + "\n"
    )


def _disc_mask(h: int, w: int, cx: float, cy: float, radius: float) -> GroundTruthMask:
    yy, xx = np.mgrid[0:h, 0:w]
    disc = (xx - cx) ** 2 + (yy - cy) ** 2 <= radius * radius
    return GroundTruthMask((disc * np.uint8(255)).astype(np.uint8))


def _write_grasp_fixture(root: Path, seed: int) -> dict:
    rng = np.random.default_rng(derive_seed(seed, "grasp"))
    gdir = root / "grasp"
    gdir.mkdir(parents=True, exist_ok=True)

    intr = CameraIntrinsics(fx=300.0, fy=300.0, cx=80.0, cy=60.0, depth_scale=0.001)
    save_intrinsics(intr, gdir / "intrinsics.json")

    depth = np.full((FRAME_H, FRAME_W), 800, dtype=np.uint16)
    depth += (np.arange(FRAME_W, dtype=np.uint16) // 8)[None, :]
    holes = rng.random((FRAME_H, FRAME_W)) < 0.03
    depth[holes] = 0
    save_depth(depth, gdir / "depth.png")

    contact_uv = (100, 70)
    rotations = [
        np.eye(3),
        np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]),
        np.array([[1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]]),
    ]
    # Candidate 0 is planted nearest to the deprojected contact point.
    z = 0.812
    px = (contact_uv[0] - intr.cx) * z / intr.fx
    py = (contact_uv[1] - intr.cy) * z / intr.fy
    translations = [np.array([px, py, z]) + np.array([0.004, -0.003, 0.002])]
    for _ in range(7):
        translations.append(
            np.array([px, py, z]) + rng.uniform(0.04, 0.25, size=3) * rng.choice([-1, 1], 3)
        )
    grasps = []
    for i, t in enumerate(translations):
        grasps.append(
            {
                "R": rotations[i % len(rotations)].tolist(),
                "t": [round(float(v), 6) for v in t],
                "width": round(float(rng.uniform(0.02, 0.08)), 4),
                "score": round(float(rng.uniform(0.1, 0.99)), 4),
            }
        )
    (gdir / "candidates.json").write_text(json.dumps({"grasps": grasps}, indent=2) + "\n")
    return {"contact_uv": list(contact_uv), "nearest_index": 0}


def generate_corpus(
    out_dir: str | Path,
    seed: int = 7,
    categories: tuple[str, ...] = CATEGORIES,
    videos_per_category: int = 2,
) -> dict:
    """Write the full fixture corpus under ``out_dir``; returns a summary."""
    out = Path(out_dir)
    videos_root = out / "videos"
    images_dir = out / "dataset" / "images"
    masks_dir = out / "dataset" / "masks"
    for d in (videos_root, images_dir, masks_dir):
        d.mkdir(parents=True, exist_ok=True)

    specs = [
        _VideoSpec(
            video_id=f"{cat}-{chr(ord('a') + i)}",
            category=cat,
            seed=derive_seed(seed, "video", cat, i),
        )
        for cat in categories
        for i in range(videos_per_category)
    ]

    manifest: dict[str, dict] = {}
    summary_records = {}
    for n, spec in enumerate(specs):
        seq, skins = _synth_video(spec)
        _write_video(videos_root, spec, seq, skins)

        # Mirror of what the extract stage will compute for this video: the
        # dataset targets must equal the memory crops exactly.
        cfg = ExtractionConfig(rng_seed=derive_seed(seed, "extract", spec.video_id))
        crop, pts, clear_idx = extract_record_from_video(seq, skins, cfg)
        cx, cy = ContactPointSet(pts.points).centroid()

        self_id = f"{spec.video_id}_self"
        save_image(crop, images_dir / f"{self_id}.png")
        save_mask(
            _disc_mask(crop.height, crop.width, cx, cy, MASK_RADIUS),
            masks_dir / f"{self_id}.png",
        )
        manifest[self_id] = {
            "image": f"images/{self_id}.png",
            "mask": f"masks/{self_id}.png",
            "category": spec.category,
            "seen": True,
        }

        t = DihedralTransform(_TARGET_TRANSFORMS[n % len(_TARGET_TRANSFORMS)])
        t_id = f"{spec.video_id}_{t.code}"
        save_image(t.apply_image(crop), images_dir / f"{t_id}.png")
        mask = _disc_mask(crop.height, crop.width, cx, cy, MASK_RADIUS)
        save_mask(GroundTruthMask(t.apply_array(mask.values)), masks_dir / f"{t_id}.png")
        manifest[t_id] = {
            "image": f"images/{t_id}.png",
            "mask": f"masks/{t_id}.png",
            "category": spec.category,
            "seen": True,
        }

        summary_records[spec.video_id] = {
            "category": spec.category,
            "clear_frame": clear_idx,
            "crop_size": [crop.width, crop.height],
            "contact_centroid": [cx, cy],
            "transform_target": t.code,
        }

    (out / "dataset" / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    )
    grasp_info = _write_grasp_fixture(out, seed)

    summary = {
        "seed": seed,
        "videos": [s.video_id for s in specs],
        "records": summary_records,
        "dataset_images": sorted(manifest),
        "grasp": grasp_info,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary
