"""Top-k retrieval of memory records for a target crop.

Candidate gating follows the seen/unseen rule: when the target category
exists in the memory only same-category records compete, otherwise the whole
memory does. Proximity is cosine similarity between image embeddings; an
optional perceptual re-rank picks the visually closest of the top results.

Neural encoders are consumed as precomputed files; the built-in
"patchgram-v1" embedder and "dssim64" distance keep everything runnable
without any model runtime.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .errors import (
    DimensionMismatch,
    EmptyMemory,
    MissingFeatureFile,
    ZeroNormVector,
)
from .memory import AffordanceMemory, EmbeddingVector
from .tensorio import RasterImage, read_tensor


class Embedder(Protocol):
    name: str

    def embed(self, img: RasterImage) -> EmbeddingVector: ...


class PerceptualDistance(Protocol):
    name: str

    def distance(self, a: RasterImage, b: RasterImage) -> float: ...


@dataclass(frozen=True)
class RetrievalResult:
    record_id: str
    similarity: float
    rank: int  # 1-based, by descending similarity


def cosine_similarity(a: EmbeddingVector, b: EmbeddingVector) -> float:
    """dot(a, b) / (|a||b|) with float64 accumulation, clamped to [-1, 1]."""
    if len(a) != len(b):
        raise DimensionMismatch(f"{len(a)} vs {len(b)} dims")
    if a.norm == 0.0 or b.norm == 0.0:
        raise ZeroNormVector("cosine similarity undefined for zero vectors")
    dot = float(a.values.astype(np.float64) @ b.values.astype(np.float64))
    return float(np.clip(dot / (a.norm * b.norm), -1.0, 1.0))


def retrieve(
    mem: AffordanceMemory,
    target_crop: RasterImage,
    target_category: str,
    k: int,
    enc: Embedder,
    cache_embeddings: bool = True,
) -> list[RetrievalResult]:
    """Top-k records by cosine similarity under category gating.

    Ties break toward the lexicographically smaller record id; a pool smaller
    than k is returned whole. Missing record embeddings are computed with
    ``enc`` and cached back into the memory.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(mem) == 0:
        raise EmptyMemory("cannot retrieve from an empty memory")
    category = target_category.strip().lower()
    pool = mem.filter(category) if mem.has_category(category) else mem.filter(None)

    target_emb = enc.embed(target_crop)
    scored: list[tuple[float, str]] = []
    for rec in pool:
        emb = rec.embeddings.get(enc.name)
        if emb is None:
            emb = enc.embed(rec.crop)
            if cache_embeddings:
                mem.cache_embedding(rec.id, emb)
        scored.append((cosine_similarity(target_emb, emb), rec.id))
    scored.sort(key=lambda t: (-t[0], t[1]))
    return [
        RetrievalResult(record_id=rid, similarity=sim, rank=i + 1)
        for i, (sim, rid) in enumerate(scored[:k])
    ]


def rerank_perceptual(
    mem: AffordanceMemory,
    results: Sequence[RetrievalResult],
    target_crop: RasterImage,
    pd: PerceptualDistance,
) -> RetrievalResult:
    """Single result whose crop is perceptually closest to the target.

    Ties keep the candidate with the better original cosine rank.
    """
    if not results:
        raise ValueError("results must be non-empty")
    best: RetrievalResult | None = None
    best_d = np.inf
    for res in sorted(results, key=lambda r: r.rank):
        d = pd.distance(target_crop, mem.get(res.record_id).crop)
        if d < best_d:
            best, best_d = res, d
    assert best is not None
    return best


# --- built-in baseline embedder ------------------------------------------------


def resize_bilinear(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample with half-pixel-centered sampling, float64 output."""
    a = np.asarray(arr, dtype=np.float64)
    h, w = a.shape[:2]
    ys = (np.arange(out_h) + 0.5) * h / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * w / out_w - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    fx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    if a.ndim == 3:
        fy = fy[:, :, None]
        fx = fx[:, :, None]
    top = a[np.ix_(y0, x0)] * (1 - fx) + a[np.ix_(y0, x1)] * fx
    bot = a[np.ix_(y1, x0)] * (1 - fx) + a[np.ix_(y1, x1)] * fx
    return top * (1 - fy) + bot * fy


def _cell_histograms(plane: np.ndarray, grid: int, bins: int) -> np.ndarray:
    """Per-cell normalized histograms of a [0,1] plane; (grid*grid*bins,)."""
    h, w = plane.shape
    out = np.empty(grid * grid * bins, dtype=np.float64)
    edges = np.linspace(0.0, 1.0, bins + 1)
    i = 0
    for gy in range(grid):
        for gx in range(grid):
            cell = plane[
                gy * h // grid : (gy + 1) * h // grid,
                gx * w // grid : (gx + 1) * w // grid,
            ]
            hist, _ = np.histogram(np.clip(cell, 0.0, 1.0), bins=edges)
            out[i : i + bins] = hist / max(cell.size, 1)
            i += bins
    return out


class PatchgramEmbedder:
    """Deterministic 512-dim baseline: per-cell grayscale and gradient
    magnitude histograms on a 4x4 grid at two scales, L2-normalized."""

    name = "patchgram-v1"
    _scales = (64, 32)
    _grid = 4
    _bins = 8

    def embed(self, img: RasterImage) -> EmbeddingVector:
        gray = img.to_gray() / 255.0
        parts = []
        for side in self._scales:
            g = resize_bilinear(gray, side, side)
            gx = np.zeros_like(g)
            gy = np.zeros_like(g)
            gx[:, 1:-1] = (g[:, 2:] - g[:, :-2]) * 0.5
            gy[1:-1, :] = (g[2:, :] - g[:-2, :]) * 0.5
            mag = np.hypot(gx, gy) / np.sqrt(2.0)
            parts.append(_cell_histograms(g, self._grid, self._bins))
            parts.append(_cell_histograms(mag, self._grid, self._bins))
        vec = np.concatenate(parts)
        vec /= np.linalg.norm(vec)
        return EmbeddingVector(vec.astype(np.float32), encoder_name=self.name)


# --- built-in baseline perceptual distance -----------------------------------


def _srgb_to_lab(rgb: np.ndarray) -> np.ndarray:
    """sRGB uint8-range (h, w, 3) to CIELAB (D65)."""
    c = np.asarray(rgb, dtype=np.float64) / 255.0
    lin = np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)
    m = np.array(
        [
            [0.4124564, 0.3575761, 0.1804375],
            [0.2126729, 0.7151522, 0.0721750],
            [0.0193339, 0.1191920, 0.9503041],
        ]
    )
    xyz = lin @ m.T
    xyz /= np.array([0.95047, 1.0, 1.08883])
    delta = 6.0 / 29.0
    f = np.where(xyz > delta**3, np.cbrt(xyz), xyz / (3 * delta**2) + 4.0 / 29.0)
    lab = np.empty_like(xyz)
    lab[..., 0] = 116.0 * f[..., 1] - 16.0
    lab[..., 1] = 500.0 * (f[..., 0] - f[..., 1])
    lab[..., 2] = 200.0 * (f[..., 1] - f[..., 2])
    return lab


class Dssim64:
    """Mean per-pixel CIELAB distance after bilinear resize to 64x64.

    Shares the PerceptualDistance interface with heavier learned metrics
    whose scores arrive through exported files.
    """

    name = "dssim64"
    _side = 64

    def distance(self, a: RasterImage, b: RasterImage) -> float:
        la = self._lab(a)
        lb = self._lab(b)
        return float(np.sqrt(((la - lb) ** 2).sum(axis=2)).mean())

    def _lab(self, img: RasterImage) -> np.ndarray:
        px = img.pixels
        if img.channels == 1:
            px = np.stack([px] * 3, axis=2)
        return _srgb_to_lab(resize_bilinear(px, self._side, self._side))


# --- file-backed encoder (exported embeddings) ---------------------------------


class FileEmbedder:
    """Embeddings precomputed by the exporter, keyed by image digest.

    Looks up <features_dir>/<digest>.emb.<name>.rft; raises
    MissingFeatureFile when the image was never exported.
    """

    def __init__(self, name: str, features_dir: str | Path):
        self.name = name
        self.features_dir = Path(features_dir)

    def embed(self, img: RasterImage) -> EmbeddingVector:
        path = self.features_dir / f"{img.digest()}.emb.{self.name}.rft"
        if not path.is_file():
            raise MissingFeatureFile(f"no exported embedding at {path}")
        t = read_tensor(path)
        return EmbeddingVector(t.values.reshape(-1), encoder_name=self.name)


def get_embedder(name: str, features_dir: str | Path | None = None) -> Embedder:
    """Resolve an encoder name: the built-in baseline, or file-backed."""
    if name == PatchgramEmbedder.name:
        return PatchgramEmbedder()
    if features_dir is None:
        raise MissingFeatureFile(
            f"encoder {name!r} needs --features pointing at exported embeddings"
        )
    return FileEmbedder(name, features_dir)


def get_perceptual(name: str) -> PerceptualDistance:
    if name == Dssim64.name:
        return Dssim64()
    raise ValueError(f"unknown perceptual distance {name!r} (available: {Dssim64.name})")
