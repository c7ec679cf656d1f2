"""Dense-feature semantic correspondence for contact-point transfer.

A source point is matched into the target by cosine similarity between its
feature vector and every cell of the target's dense feature map. Because
matching is orientation-sensitive, the source image is additionally tried
under all 8 square symmetries (4 rotations x optional horizontal flip) and
the most similar result wins.

Feature extraction is pluggable: "toygrid" computes deterministic,
dihedral-equivariant intensity statistics (used in tests and demos), while
file-backed extraction consumes maps exported from heavyweight models.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from . import _kernels
from .errors import (
    AllSourcesFailed,
    DimensionMismatch,
    MissingFeatureFile,
    OutOfBounds,
    ZeroFeature,
)
from .extraction import ContactPointSet, ExtractionConfig, finalize_contact_points
from .memory import AffordanceRecord
from .tensorio import RasterImage, Tensor, read_tensor, write_tensor

DIHEDRAL_CODES = ("r0", "r90", "r180", "r270", "r0f", "r90f", "r180f", "r270f")


@dataclass(frozen=True)
class DihedralTransform:
    """One of the 8 square symmetries: k clockwise quarter-turns, then an
    optional horizontal flip."""

    code: str

    def __post_init__(self):
        if self.code not in DIHEDRAL_CODES:
            raise ValueError(f"unknown transform code {self.code!r}")

    @property
    def quarter_turns(self) -> int:
        return int(self.code[1:].rstrip("f")) // 90

    @property
    def flipped(self) -> bool:
        return self.code.endswith("f")

    def output_size(self, size: tuple[int, int]) -> tuple[int, int]:
        w, h = size
        return (h, w) if self.quarter_turns % 2 else (w, h)

    def apply_array(self, arr: np.ndarray) -> np.ndarray:
        out = np.rot90(arr, k=-self.quarter_turns)
        if self.flipped:
            out = out[:, ::-1]
        return np.ascontiguousarray(out)

    def apply_image(self, img: RasterImage) -> RasterImage:
        return RasterImage(self.apply_array(img.pixels))

    def apply_point(
        self, p: tuple[float, float], size: tuple[int, int]
    ) -> tuple[float, float]:
        """Exact coordinate map for a point in an image of ``size`` (w, h)."""
        x, y = float(p[0]), float(p[1])
        w, h = size
        for _ in range(self.quarter_turns):
            x, y = h - 1 - y, x
            w, h = h, w
        if self.flipped:
            x = w - 1 - x
        return (x, y)

    def inverse(self) -> "DihedralTransform":
        # Reflections (flipped codes) are involutions; pure rotations invert
        # by completing the turn.
        if self.flipped:
            return self
        k = (4 - self.quarter_turns) % 4
        return DihedralTransform(f"r{k * 90}")


ALL_TRANSFORMS = tuple(DihedralTransform(c) for c in DIHEDRAL_CODES)
IDENTITY_TRANSFORM = ALL_TRANSFORMS[0]


@dataclass(frozen=True, eq=False)
class DenseFeatureMap:
    """Per-cell feature grid describing an image of (image_w, image_h) pixels.

    data is float32 [channels, grid_h, grid_w]; the grid is never finer than
    the image.
    """

    data: np.ndarray
    image_h: int
    image_w: int

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float32)
        if arr.ndim != 3 or arr.shape[1] < 1 or arr.shape[2] < 1:
            raise ValueError(f"feature map must be [c, gh, gw], got {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("feature map contains NaN or Inf")
        if self.image_h < arr.shape[1] or self.image_w < arr.shape[2]:
            raise ValueError("feature grid is finer than the image it describes")
        object.__setattr__(self, "data", arr)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def grid_h(self) -> int:
        return self.data.shape[1]

    @property
    def grid_w(self) -> int:
        return self.data.shape[2]

    def cell_center(self, gx: int, gy: int) -> tuple[float, float]:
        """Pixel coordinates of a grid cell center."""
        return (
            (gx + 0.5) * self.image_w / self.grid_w - 0.5,
            (gy + 0.5) * self.image_h / self.grid_h - 0.5,
        )


@dataclass(frozen=True)
class MatchResult:
    target_point: tuple[float, float]
    similarity: float
    transform: DihedralTransform = IDENTITY_TRANSFORM
    source_record_id: str = ""


@dataclass(frozen=True)
class TransferConfig:
    averaging_mode: str = "map-then-average"
    use_transforms: bool = True
    resample_radius: float = 4.0
    resample_count: int = 5
    rng_seed: int = 7

    def __post_init__(self):
        if self.averaging_mode not in ("map-then-average", "average-then-map"):
            raise ValueError(f"unknown averaging_mode {self.averaging_mode!r}")


def feature_at(fm: DenseFeatureMap, p: tuple[float, float]) -> np.ndarray:
    """Bilinearly interpolated feature vector at pixel ``p`` (x, y)."""
    x, y = float(p[0]), float(p[1])
    if not (0 <= x < fm.image_w and 0 <= y < fm.image_h):
        raise OutOfBounds(f"point {p} outside image {fm.image_w}x{fm.image_h}")
    gx = (x + 0.5) * fm.grid_w / fm.image_w - 0.5
    gy = (y + 0.5) * fm.grid_h / fm.image_h - 0.5
    x0 = int(np.clip(np.floor(gx), 0, fm.grid_w - 1))
    y0 = int(np.clip(np.floor(gy), 0, fm.grid_h - 1))
    x1 = min(x0 + 1, fm.grid_w - 1)
    y1 = min(y0 + 1, fm.grid_h - 1)
    fx = float(np.clip(gx - x0, 0.0, 1.0))
    fy = float(np.clip(gy - y0, 0.0, 1.0))
    d = fm.data.astype(np.float64)
    top = d[:, y0, x0] * (1 - fx) + d[:, y0, x1] * fx
    bot = d[:, y1, x0] * (1 - fx) + d[:, y1, x1] * fx
    return top * (1 - fy) + bot * fy


def match_point(
    src_fm: DenseFeatureMap,
    p_s: tuple[float, float],
    tgt_fm: DenseFeatureMap,
) -> MatchResult:
    """Most similar target cell to the source point's feature vector.

    Ties break toward the smallest row-major cell index; the matched point is
    reported at the cell center.
    """
    if src_fm.channels != tgt_fm.channels:
        raise DimensionMismatch(
            f"{src_fm.channels} vs {tgt_fm.channels} feature channels"
        )
    q = feature_at(src_fm, p_s)
    if float(q @ q) == 0.0:
        raise ZeroFeature(f"source feature at {p_s} has zero norm")
    cells = np.ascontiguousarray(
        tgt_fm.data.reshape(tgt_fm.channels, -1).T, dtype=np.float64
    )
    idx, sim = _kernels.cosine_best_cell(cells, q)
    gy, gx = divmod(int(idx), tgt_fm.grid_w)
    return MatchResult(target_point=tgt_fm.cell_center(gx, gy), similarity=float(sim))


class FeatureExtractor(Protocol):
    """Produces the dense feature map of ``transform`` applied to ``img``."""

    name: str

    def extract(
        self, img: RasterImage, transform: DihedralTransform = IDENTITY_TRANSFORM
    ) -> DenseFeatureMap: ...


def match_with_transforms(
    src_img: RasterImage,
    p_s: tuple[float, float],
    tgt_fm: DenseFeatureMap,
    fx: FeatureExtractor,
    transforms: Sequence[DihedralTransform] = ALL_TRANSFORMS,
    r0_map: DenseFeatureMap | None = None,
    map_cache: dict[str, DenseFeatureMap] | None = None,
) -> MatchResult:
    """Best match over the source image's dihedral orbit.

    Each transform moves both the source pixels (via the extractor) and the
    source point (via the exact coordinate map); the globally most similar
    match wins, ties resolved in ``transforms`` order. ``r0_map`` short-cuts
    re-extraction for the identity transform; ``map_cache`` (shared across
    points of one source) avoids re-extracting per point.
    """
    best: MatchResult | None = None
    for t in transforms:
        fm = None
        if t.code == "r0" and r0_map is not None:
            fm = r0_map
        elif map_cache is not None:
            fm = map_cache.get(t.code)
        if fm is None:
            fm = fx.extract(src_img, t)
            if map_cache is not None:
                map_cache[t.code] = fm
        p_t = t.apply_point(p_s, (src_img.width, src_img.height))
        res = match_point(fm, p_t, tgt_fm)
        if best is None or res.similarity > best.similarity:
            best = MatchResult(
                target_point=res.target_point,
                similarity=res.similarity,
                transform=t,
            )
    assert best is not None
    return best


def transfer_affordance(
    sources: Sequence[tuple[AffordanceRecord, DenseFeatureMap]],
    tgt_img: RasterImage,
    tgt_fm: DenseFeatureMap,
    fx: FeatureExtractor,
    cfg: TransferConfig = TransferConfig(),
) -> tuple[ContactPointSet, MatchResult]:
    """Map every candidate source's contact points onto the target and keep
    the source with the highest mean similarity.

    The winner's mean mapped location becomes the centroid of the final
    disk-resampled point set. Returns (final points, best single match of the
    winning source).
    """
    if not sources:
        raise AllSourcesFailed("no sources supplied")
    transforms = ALL_TRANSFORMS if cfg.use_transforms else (IDENTITY_TRANSFORM,)

    failures: list[str] = []
    winner: tuple[float, int, np.ndarray, MatchResult] | None = None
    for order, (rec, src_fm) in enumerate(sources):
        pts = rec.contact_points.points
        if cfg.averaging_mode == "average-then-map":
            pts = pts.mean(axis=0, keepdims=True)
        map_cache: dict[str, DenseFeatureMap] = {}
        try:
            matches = [
                match_with_transforms(
                    rec.crop, (float(x), float(y)), tgt_fm, fx, transforms, src_fm,
                    map_cache,
                )
                for x, y in pts
            ]
        except (ZeroFeature, DimensionMismatch, MissingFeatureFile, OutOfBounds) as e:
            failures.append(f"{rec.id}: {e}")
            continue
        mean_sim = float(np.mean([m.similarity for m in matches]))
        mean_loc = np.mean([m.target_point for m in matches], axis=0)
        best_match = max(matches, key=lambda m: m.similarity)
        candidate = (
            mean_sim,
            -order,  # earlier retrieval rank wins ties
            mean_loc,
            MatchResult(
                target_point=best_match.target_point,
                similarity=best_match.similarity,
                transform=best_match.transform,
                source_record_id=rec.id,
            ),
        )
        if winner is None or (candidate[0], candidate[1]) > (winner[0], winner[1]):
            winner = candidate

    if winner is None:
        raise AllSourcesFailed("; ".join(failures))

    _, _, mean_loc, best = winner
    centroid = ContactPointSet(mean_loc[None, :])
    resample_cfg = ExtractionConfig(
        resample_radius=cfg.resample_radius,
        resample_count=cfg.resample_count,
        rng_seed=cfg.rng_seed,
    )
    final = finalize_contact_points(
        centroid, resample_cfg, (tgt_img.width, tgt_img.height)
    )
    return final, best


# --- built-in extractor -----------------------------------------------------------


def _bilinear_zeropad(gray: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Sample a (h, w) plane at float (x, y) points; outside reads as 0."""
    h, w = gray.shape
    x, y = pts[..., 0], pts[..., 1]
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    fx, fy = x - x0, y - y0
    out = np.zeros(x.shape, dtype=np.float64)
    for dy in (0, 1):
        for dx in (0, 1):
            xi, yi = x0 + dx, y0 + dy
            valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            wgt = (fx if dx else 1 - fx) * (fy if dy else 1 - fy)
            vals = np.zeros_like(out)
            vals[valid] = gray[yi[valid], xi[valid]]
            out += wgt * vals
    return out


class ToyGridExtractor:
    """Deterministic dense features: the mean-centered local grayscale patch
    in canonical reading order (offsets -reach..reach on both axes).

    The offset set is closed under the dihedral group, so extracting from a
    transformed image yields exactly the transformed feature field with
    channels permuted by the same symmetry; matching therefore behaves
    equivariantly once the transform search realigns the source. Patches are
    orientation-sensitive on purpose: cosine between centered patches is
    plain normalized cross-correlation.
    """

    name = "toygrid"

    def __init__(self, stride: int = 1, reach: int = 4):
        if stride < 1 or reach < 1:
            raise ValueError("stride and reach must be >= 1")
        self.stride = stride
        self.reach = reach
        span = np.arange(-float(reach), reach + 1.0)
        bx, by = np.meshgrid(span, span)
        self.offsets = np.stack([bx.ravel(), by.ravel()], axis=1)  # (ch, 2)

    @property
    def channels(self) -> int:
        return len(self.offsets)

    def extract(
        self, img: RasterImage, transform: DihedralTransform = IDENTITY_TRANSFORM
    ) -> DenseFeatureMap:
        timg = transform.apply_image(img)
        gray = timg.to_gray() / 255.0
        h, w = gray.shape
        gh = max(1, h // self.stride)
        gw = max(1, w // self.stride)
        cx = (np.arange(gw) + 0.5) * w / gw - 0.5
        cy = (np.arange(gh) + 0.5) * h / gh - 0.5
        centers = np.stack(np.meshgrid(cx, cy), axis=-1).reshape(-1, 2)  # (g, 2)
        patches = _bilinear_zeropad(
            gray, centers[:, None, :] + self.offsets[None, :, :]
        )  # (g, ch)
        patches -= patches.mean(axis=1, keepdims=True)
        data = patches.T.reshape(self.channels, gh, gw)
        return DenseFeatureMap(data=data.astype(np.float32), image_h=h, image_w=w)


# --- file-backed extractor -------------------------------------------------------


def feature_file_stem(digest: str, code: str) -> str:
    return f"{digest}.{code}"


def write_feature_map(
    fm: DenseFeatureMap, out_dir: str | Path, digest: str, code: str, extractor: str
) -> Path:
    """Persist a map plus its sidecar in the exporter-compatible layout."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = feature_file_stem(digest, code)
    write_tensor(Tensor(fm.data), out_dir / f"{stem}.rft")
    sidecar = {"image_h": fm.image_h, "image_w": fm.image_w, "extractor": extractor}
    (out_dir / f"{stem}.json").write_text(json.dumps(sidecar) + "\n")
    return out_dir / f"{stem}.rft"


class FileFeatureExtractor:
    """Feature maps precomputed offline, keyed by image digest + transform.

    Expects <dir>/<digest>.<code>.rft and a sidecar JSON with the transformed
    image's pixel size and the extractor identifier.
    """

    def __init__(self, name: str, features_dir: str | Path):
        self.name = name
        self.features_dir = Path(features_dir)

    def extract(
        self, img: RasterImage, transform: DihedralTransform = IDENTITY_TRANSFORM
    ) -> DenseFeatureMap:
        stem = feature_file_stem(img.digest(), transform.code)
        rft = self.features_dir / f"{stem}.rft"
        sidecar = self.features_dir / f"{stem}.json"
        if not rft.is_file() or not sidecar.is_file():
            raise MissingFeatureFile(f"no exported feature map at {rft}")
        meta = json.loads(sidecar.read_text())
        if meta.get("extractor") not in (None, self.name):
            raise MissingFeatureFile(
                f"{rft} was exported by {meta.get('extractor')!r}, not {self.name!r}"
            )
        t = read_tensor(rft)
        if t.values.ndim != 3:
            raise MissingFeatureFile(f"{rft}: expected [c, gh, gw], got {t.shape}")
        return DenseFeatureMap(
            data=t.values, image_h=int(meta["image_h"]), image_w=int(meta["image_w"])
        )


def get_extractor(name: str, features_dir: str | Path | None = None) -> FeatureExtractor:
    """Resolve an extractor name: the built-in "toygrid", or file-backed."""
    if name == ToyGridExtractor.name:
        return ToyGridExtractor()
    if features_dir is None:
        raise MissingFeatureFile(
            f"extractor {name!r} needs --features pointing at exported maps"
        )
    return FileFeatureExtractor(name, features_dir)
