"""Contact-point prediction metrics and the dataset-level harness.

Three metrics per image, each against an 8-bit ground-truth mask:

* SR  - fraction of predicted points whose mask value is strictly above the
  threshold (default 122).
* NSS - mean of mask(p) / max(mask), in [0, 1]; defined as 0 for an all-zero
  mask.
* DTM - mean shortest distance from each point's pixel to the thresholded
  mask contour (0 inside), normalized by the image diagonal.

Dataset aggregates are unweighted means over images, reported overall, per
category, and per seen/unseen split.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .errors import (
    EmptyMaskRegion,
    EmptyPrediction,
    InvalidPrediction,
    MissingMask,
    MissingPrediction,
    ParseFailure,
)
from .tensorio import GroundTruthMask, RasterImage, Tensor, load_mask

DEFAULT_THRESHOLD = 122
MAX_POINTS_PER_IMAGE = 5


@dataclass(frozen=True)
class Prediction:
    image_id: str
    points: np.ndarray  # (m, 2) integer pixel coordinates, 1 <= m <= 5
    method_name: str = ""

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        if len(pts) == 0:
            raise EmptyPrediction(f"{self.image_id}: prediction has no points")
        if len(pts) > MAX_POINTS_PER_IMAGE:
            raise InvalidPrediction(
                f"{self.image_id}: {len(pts)} points exceeds the {MAX_POINTS_PER_IMAGE}-point cap"
            )
        object.__setattr__(self, "points", np.floor(pts + 0.5).astype(np.int64))


def load_predictions(path: str | Path) -> list[Prediction]:
    """Parse a predictions JSON-lines file."""
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            out.append(
                Prediction(
                    image_id=str(obj["image_id"]),
                    points=np.array(obj["points"], dtype=np.float64),
                    method_name=str(obj.get("method", "")),
                )
            )
        except (KeyError, ValueError, json.JSONDecodeError) as e:
            raise ParseFailure(f"{path}:{lineno}: {e}") from e
    return out


def _as_pixel_points(points, mask: GroundTruthMask) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) == 0:
        raise EmptyPrediction("no points to evaluate")
    px = np.floor(pts + 0.5).astype(np.int64)
    if (
        (px[:, 0] < 0).any()
        or (px[:, 0] >= mask.width).any()
        or (px[:, 1] < 0).any()
        or (px[:, 1] >= mask.height).any()
    ):
        raise InvalidPrediction(f"point outside {mask.width}x{mask.height} mask")
    return px


def metric_sr(points, mask: GroundTruthMask, threshold: int = DEFAULT_THRESHOLD) -> float:
    """Fraction of points with mask value strictly above ``threshold``."""
    px = _as_pixel_points(points, mask)
    vals = mask.values[px[:, 1], px[:, 0]].astype(np.int64)
    return float((vals > threshold).sum() / len(px))


def metric_nss(points, mask: GroundTruthMask) -> float:
    """Mean of mask(p) / max(mask); 0 when the mask is identically zero."""
    px = _as_pixel_points(points, mask)
    peak = int(mask.values.max())
    if peak == 0:
        return 0.0
    vals = mask.values[px[:, 1], px[:, 0]].astype(np.float64)
    return float(vals.mean() / peak)


def mask_contour(mask: GroundTruthMask, threshold: int = DEFAULT_THRESHOLD) -> np.ndarray:
    """(k, 2) integer (x, y) pixels above threshold that touch a
    below-threshold pixel 4-adjacently or the image border."""
    above = mask.values.astype(np.int64) > threshold
    padded = np.pad(above, 1, mode="constant", constant_values=False)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    contour = above & ~interior
    ys, xs = np.nonzero(contour)
    return np.stack([xs, ys], axis=1)


def metric_dtm(
    points,
    mask: GroundTruthMask,
    image_size: tuple[int, int] | None = None,
    threshold: int = DEFAULT_THRESHOLD,
) -> float:
    """Mean center-to-center distance to the mask contour over the diagonal.

    A point whose own pixel is above threshold contributes 0.
    """
    px = _as_pixel_points(points, mask)
    contour = mask_contour(mask, threshold)
    if len(contour) == 0:
        raise EmptyMaskRegion(f"no mask pixel above threshold {threshold}")
    w, h = image_size if image_size is not None else (mask.width, mask.height)
    inside = mask.values[px[:, 1], px[:, 0]].astype(np.int64) > threshold
    dists = np.zeros(len(px), dtype=np.float64)
    outside = ~inside
    if outside.any():
        dists[outside] = _kernels.point_min_distances(
            px[outside].astype(np.float64), contour.astype(np.float64)
        )
    return float(dists.mean() / np.hypot(w, h))


# --- dataset harness ---------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    image_id: str
    image: Path
    mask: Path
    category: str
    seen: bool


def load_manifest(path: str | Path) -> dict[str, ManifestEntry]:
    """Manifest JSON: image_id -> {image, mask, category, seen}; relative
    paths resolve against the manifest's directory."""
    path = Path(path)
    try:
        obj = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ParseFailure(f"{path}: {e}") from e
    base = path.parent
    out = {}
    for image_id, entry in obj.items():
        try:
            out[image_id] = ManifestEntry(
                image_id=image_id,
                image=base / entry["image"],
                mask=base / entry["mask"],
                category=str(entry["category"]).strip().lower(),
                seen=bool(entry.get("seen", False)),
            )
        except KeyError as e:
            raise ParseFailure(f"{path}: entry {image_id!r} missing key {e}") from e
    return out


@dataclass
class EvalReport:
    threshold: int
    per_image: list[dict]
    per_category: dict[str, dict]
    seen_split: dict[str, dict]
    overall: dict
    skipped: dict[str, list[str]] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {
                "threshold": self.threshold,
                "overall": self.overall,
                "per_category": self.per_category,
                "seen_split": self.seen_split,
                "per_image": self.per_image,
                "skipped": self.skipped,
            },
            indent=2,
            sort_keys=True,
        )

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["scope", "name", "images", "sr_percent", "nss", "dtm"])
        for cat in sorted(self.per_category):
            row = self.per_category[cat]
            w.writerow(
                ["category", cat, row["images"], f"{row['sr_percent']:.4f}",
                 f"{row['nss']:.6f}", f"{row['dtm']:.6f}"]
            )
        for split in sorted(self.seen_split):
            row = self.seen_split[split]
            w.writerow(
                ["split", split, row["images"], f"{row['sr_percent']:.4f}",
                 f"{row['nss']:.6f}", f"{row['dtm']:.6f}"]
            )
        w.writerow(
            ["overall", "all", self.overall["images"],
             f"{self.overall['sr_percent']:.4f}", f"{self.overall['nss']:.6f}",
             f"{self.overall['dtm']:.6f}"]
        )
        return buf.getvalue()

    def table(self) -> str:
        lines = [f"{'category':<18}{'images':>7}{'SR%':>9}{'NSS':>9}{'DTM':>9}"]
        for cat in sorted(self.per_category):
            r = self.per_category[cat]
            lines.append(
                f"{cat:<18}{r['images']:>7}{r['sr_percent']:>9.1f}"
                f"{r['nss']:>9.3f}{r['dtm']:>9.4f}"
            )
        r = self.overall
        lines.append(
            f"{'overall':<18}{r['images']:>7}{r['sr_percent']:>9.1f}"
            f"{r['nss']:>9.3f}{r['dtm']:>9.4f}"
        )
        return "\n".join(lines)


def _aggregate(rows: list[dict]) -> dict:
    return {
        "images": len(rows),
        "sr_percent": float(np.mean([r["sr"] for r in rows]) * 100.0),
        "nss": float(np.mean([r["nss"] for r in rows])),
        "dtm": float(np.mean([r["dtm"] for r in rows])),
    }


def evaluate_dataset(
    preds: list[Prediction] | str | Path,
    manifest: dict[str, ManifestEntry] | str | Path,
    threshold: int = DEFAULT_THRESHOLD,
    allow_partial: bool = False,
) -> EvalReport:
    """Evaluate a prediction set against a dataset manifest.

    Predictions without a usable mask and manifest entries without a
    prediction are failures unless ``allow_partial`` lists them and goes on.
    """
    if not isinstance(preds, list):
        preds = load_predictions(preds)
    if not isinstance(manifest, dict):
        manifest = load_manifest(manifest)

    by_id = {p.image_id: p for p in preds}
    missing_mask = sorted(
        [i for i in by_id if i not in manifest or not manifest[i].mask.is_file()]
    )
    missing_pred = sorted([i for i in manifest if i not in by_id])
    if missing_mask and not allow_partial:
        raise MissingMask(f"predictions without masks: {missing_mask}")
    if missing_pred and not allow_partial:
        raise MissingPrediction(f"manifest entries without predictions: {missing_pred}")

    rows = []
    for image_id in sorted(by_id):
        if image_id in missing_mask:
            continue
        entry = manifest[image_id]
        mask = load_mask(entry.mask)
        pts = by_id[image_id].points
        rows.append(
            {
                "image_id": image_id,
                "category": entry.category,
                "seen": entry.seen,
                "sr": metric_sr(pts, mask, threshold),
                "nss": metric_nss(pts, mask),
                "dtm": metric_dtm(pts, mask, threshold=threshold),
            }
        )
    if not rows:
        raise MissingPrediction("nothing to evaluate")

    categories = sorted({r["category"] for r in rows})
    per_category = {
        c: _aggregate([r for r in rows if r["category"] == c]) for c in categories
    }
    seen_split = {}
    for label, flag in (("seen", True), ("unseen", False)):
        subset = [r for r in rows if r["seen"] == flag]
        if subset:
            seen_split[label] = _aggregate(subset)
    return EvalReport(
        threshold=threshold,
        per_image=rows,
        per_category=per_category,
        seen_split=seen_split,
        overall=_aggregate(rows),
        skipped={"missing_mask": missing_mask, "missing_prediction": missing_pred},
    )


def sr_threshold_curve(
    preds: list[Prediction] | str | Path,
    manifest: dict[str, ManifestEntry] | str | Path,
    thresholds: list[int],
    allow_partial: bool = False,
) -> list[tuple[int, float]]:
    """Overall SR (fraction) recomputed at each threshold.

    Only SR is re-evaluated, so thresholds that empty the mask are fine.
    """
    for t in thresholds:
        if not 0 <= t <= 255:
            raise ValueError(f"threshold {t} outside [0, 255]")
    if not isinstance(preds, list):
        preds = load_predictions(preds)
    if not isinstance(manifest, dict):
        manifest = load_manifest(manifest)

    by_id = {p.image_id: p for p in preds}
    usable = []
    for image_id in sorted(by_id):
        entry = manifest.get(image_id)
        if entry is None or not entry.mask.is_file():
            if not allow_partial:
                raise MissingMask(f"prediction {image_id!r} has no mask")
            continue
        usable.append((by_id[image_id].points, load_mask(entry.mask)))
    if not usable:
        raise MissingPrediction("nothing to evaluate")
    return [
        (t, float(np.mean([metric_sr(pts, mask, t) for pts, mask in usable])))
        for t in thresholds
    ]


# --- rendering + heatmap plumbing ---------------------------------------------

_MASK_COLOR = np.array([255, 80, 80], dtype=np.int64)
_POINT_COLOR = np.array([255, 200, 0], dtype=np.int64)
_POINT_RADIUS = 5


def render_overlay(
    img: RasterImage,
    points,
    mask: GroundTruthMask | None = None,
) -> RasterImage:
    """Deterministic visualization: mask blended at weight 0.4 wherever its
    value is positive, then points drawn as filled 5 px radius discs."""
    px = img.pixels
    if img.channels == 1:
        px = np.stack([px] * 3, axis=2)
    out = px.astype(np.int64).copy()
    if mask is not None:
        if (mask.height, mask.width) != (img.height, img.width):
            raise ValueError("mask size does not match the image")
        where = mask.values > 0
        blended = (out * 3 + _MASK_COLOR[None, None, :] * 2 + 2) // 5  # 0.4 alpha
        out[where] = blended[where]
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    h, w = out.shape[:2]
    yy, xx = np.mgrid[-_POINT_RADIUS : _POINT_RADIUS + 1, -_POINT_RADIUS : _POINT_RADIUS + 1]
    disc = xx * xx + yy * yy <= _POINT_RADIUS * _POINT_RADIUS
    offs = np.stack([xx[disc], yy[disc]], axis=1)
    for x, y in np.floor(pts + 0.5).astype(np.int64):
        if not (0 <= x < w and 0 <= y < h):
            raise InvalidPrediction(f"overlay point ({x},{y}) outside image")
        tgt = offs + np.array([x, y])
        ok = (tgt[:, 0] >= 0) & (tgt[:, 0] < w) & (tgt[:, 1] >= 0) & (tgt[:, 1] < h)
        out[tgt[ok, 1], tgt[ok, 0]] = _POINT_COLOR
    return RasterImage(out.astype(np.uint8))


def heatmap_top_points(heatmap: Tensor | np.ndarray, k: int = 5) -> list[tuple[int, int]]:
    """Top-k cells of a 2-D heatmap as (x, y), ties toward the smaller
    row-major index. Helper for adapting heatmap-producing baselines."""
    arr = heatmap.values if isinstance(heatmap, Tensor) else np.asarray(heatmap)
    if arr.ndim != 2:
        raise ValueError(f"heatmap must be 2-D, got shape {arr.shape}")
    flat = arr.ravel()
    k = min(k, flat.size)
    order = np.lexsort((np.arange(flat.size), -flat.astype(np.float64)))[:k]
    return [(int(i % arr.shape[1]), int(i // arr.shape[1])) for i in order]
