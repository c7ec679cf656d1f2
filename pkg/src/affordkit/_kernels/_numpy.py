"""Vectorized numpy implementations of the hot kernels.

These are the reference semantics; the Cython module mirrors them loop for
loop. All accumulation is float64.
"""

from __future__ import annotations

import numpy as np

# Similarity assigned to target cells whose feature vector has zero norm:
# strictly below the cosine range so such cells never win the argmax unless
# every cell is zero.
ZERO_CELL_SIMILARITY = -2.0


def laplacian_variance(gray: np.ndarray) -> float:
    """Population variance of the 3x3 Laplacian response.

    The response is computed where the kernel fits and is zero along the
    border, so a flat image scores exactly 0.
    """
    g = np.asarray(gray, dtype=np.float64)
    if g.ndim != 2 or g.size == 0:
        raise ValueError("expected a non-empty 2-D array")
    resp = np.zeros_like(g)
    if g.shape[0] >= 3 and g.shape[1] >= 3:
        resp[1:-1, 1:-1] = (
            g[:-2, 1:-1] + g[2:, 1:-1] + g[1:-1, :-2] + g[1:-1, 2:]
            - 4.0 * g[1:-1, 1:-1]
        )
    return float(resp.var())


def cosine_best_cell(cells: np.ndarray, query: np.ndarray) -> tuple[int, float]:
    """Argmax of cosine(query, cells[i]) over rows of ``cells`` (n, c).

    Ties break toward the smallest index; zero-norm cells score
    ZERO_CELL_SIMILARITY. The query must have nonzero norm (callers enforce).
    """
    c = np.asarray(cells, dtype=np.float64)
    q = np.asarray(query, dtype=np.float64)
    qn = float(np.sqrt(q @ q))
    norms = np.sqrt(np.einsum("ij,ij->i", c, c))
    dots = c @ q
    sims = np.full(c.shape[0], ZERO_CELL_SIMILARITY, dtype=np.float64)
    ok = norms > 0.0
    sims[ok] = dots[ok] / (norms[ok] * qn)
    idx = int(np.argmax(sims))
    return idx, float(sims[idx])


def point_min_distances(points: np.ndarray, sites: np.ndarray) -> np.ndarray:
    """Per point, the min Euclidean distance to any row of ``sites`` (k, 2)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    s = np.asarray(sites, dtype=np.float64).reshape(-1, 2)
    if s.shape[0] == 0:
        raise ValueError("empty site set")
    out = np.empty(pts.shape[0], dtype=np.float64)
    for i, (x, y) in enumerate(pts):
        out[i] = np.sqrt(np.min((s[:, 0] - x) ** 2 + (s[:, 1] - y) ** 2))
    return out
