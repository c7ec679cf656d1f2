"""Planar homography estimation between frames.

The default match source is self-contained: Harris corners, 11x11 zero-mean
normalized cross-correlation patch descriptors, mutual-best filtering. The
model is fit with a normalized DLT inside RANSAC and refit on all inliers.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DegenerateConfiguration, NoConsensus, TooFewMatches
from .tensorio import RasterImage

RANSAC_ITERS = 2000
INLIER_THRESHOLD_PX = 3.0
HARRIS_K = 0.04
MAX_CORNERS = 200
PATCH_RADIUS = 5  # 11x11 patches


@dataclass(frozen=True, eq=False)
class Homography:
    """3x3 projective map, normalized so h[2,2] == 1."""

    h: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.h, dtype=np.float64)
        if m.shape != (3, 3):
            raise DegenerateConfiguration(f"homography must be 3x3, got {m.shape}")
        if abs(m[2, 2]) < 1e-12:
            raise DegenerateConfiguration("h[2,2] is numerically zero")
        m = m / m[2, 2]
        if abs(np.linalg.det(m)) < 1e-12:
            raise DegenerateConfiguration("homography is not invertible")
        object.__setattr__(self, "h", m)

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map (n, 2) points with homogeneous normalization."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        ph = np.hstack([pts, np.ones((len(pts), 1))])
        q = ph @ self.h.T
        return q[:, :2] / q[:, 2:3]

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.h))


def compose(chain: Sequence[Homography]) -> Homography:
    """Single map equivalent to applying ``chain`` in order."""
    m = np.eye(3)
    for hom in chain:
        m = hom.h @ m
    return Homography(m)


# --- internal corner matcher ---------------------------------------------------


def _convolve2d_same(img: np.ndarray, kx: np.ndarray, ky: np.ndarray) -> np.ndarray:
    """Separable convolution with zero padding."""
    rx, ry = len(kx) // 2, len(ky) // 2
    p = np.pad(img, ((0, 0), (rx, rx)), mode="constant")
    out = np.zeros_like(img)
    for i, k in enumerate(kx):
        out += k * p[:, i : i + img.shape[1]]
    p = np.pad(out, ((ry, ry), (0, 0)), mode="constant")
    out = np.zeros_like(img)
    for i, k in enumerate(ky):
        out += k * p[i : i + img.shape[0], :]
    return out


def _sobel(gray: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    gx = _convolve2d_same(gray, np.array([-1.0, 0.0, 1.0]), np.array([1.0, 2.0, 1.0]))
    gy = _convolve2d_same(gray, np.array([1.0, 2.0, 1.0]), np.array([-1.0, 0.0, 1.0]))
    return gx, gy


_BINOMIAL5 = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


def harris_corners(
    img: RasterImage,
    k: float = HARRIS_K,
    max_corners: int = MAX_CORNERS,
    border: int = PATCH_RADIUS + 2,
) -> np.ndarray:
    """Top corner locations as an (n, 2) int array of (x, y) pixels.

    Response uses a binomial-smoothed structure tensor; 3x3 non-max
    suppression; corners too close to the border for patch extraction are
    dropped.
    """
    gray = img.to_gray() / 255.0
    gx, gy = _sobel(gray)
    gxx = _convolve2d_same(gx * gx, _BINOMIAL5, _BINOMIAL5)
    gyy = _convolve2d_same(gy * gy, _BINOMIAL5, _BINOMIAL5)
    gxy = _convolve2d_same(gx * gy, _BINOMIAL5, _BINOMIAL5)
    resp = gxx * gyy - gxy * gxy - k * (gxx + gyy) ** 2

    h, w = resp.shape
    if resp.max(initial=0.0) <= 0.0 or min(h, w) <= 2 * border:
        return np.empty((0, 2), dtype=np.int64)

    p = np.pad(resp, 1, mode="constant", constant_values=-np.inf)
    neighborhood_max = np.max(
        np.stack(
            [p[dy : dy + h, dx : dx + w] for dy in range(3) for dx in range(3)]
        ),
        axis=0,
    )
    is_peak = (resp >= neighborhood_max) & (resp > 0.01 * resp.max())
    is_peak[:border, :] = is_peak[-border:, :] = False
    is_peak[:, :border] = is_peak[:, -border:] = False
    ys, xs = np.nonzero(is_peak)
    if len(xs) == 0:
        return np.empty((0, 2), dtype=np.int64)
    order = np.argsort(-resp[ys, xs], kind="stable")[:max_corners]
    return np.stack([xs[order], ys[order]], axis=1)


def _patches(gray: np.ndarray, corners: np.ndarray, radius: int = PATCH_RADIUS) -> np.ndarray:
    """Zero-mean, unit-norm 11x11 patch descriptors; flat patches get norm 0."""
    side = 2 * radius + 1
    out = np.empty((len(corners), side * side), dtype=np.float64)
    for i, (x, y) in enumerate(corners):
        patch = gray[y - radius : y + radius + 1, x - radius : x + radius + 1]
        out[i] = patch.ravel()
    out -= out.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(out, axis=1, keepdims=True)
    np.divide(out, norms, out=out, where=norms > 1e-12)
    out[norms[:, 0] <= 1e-12] = 0.0
    return out


def match_corners(src: RasterImage, dst: RasterImage) -> tuple[np.ndarray, np.ndarray]:
    """Mutual-best NCC matches between Harris corners of two images."""
    ca, cb = harris_corners(src), harris_corners(dst)
    if len(ca) == 0 or len(cb) == 0:
        raise TooFewMatches(f"corner detection found {len(ca)} vs {len(cb)} corners")
    da = _patches(src.to_gray() / 255.0, ca)
    db = _patches(dst.to_gray() / 255.0, cb)
    sim = da @ db.T
    best_ab = np.argmax(sim, axis=1)
    best_ba = np.argmax(sim, axis=0)
    ia = np.arange(len(ca))
    mutual = best_ba[best_ab] == ia
    src_pts = ca[mutual].astype(np.float64)
    dst_pts = cb[best_ab[mutual]].astype(np.float64)
    if len(src_pts) < 4:
        raise TooFewMatches(f"only {len(src_pts)} mutual matches")
    return src_pts, dst_pts


# --- normalized DLT + RANSAC ----------------------------------------------------


def _normalization(pts: np.ndarray) -> np.ndarray:
    """Hartley similarity transform: centroid to origin, mean norm sqrt(2)."""
    c = pts.mean(axis=0)
    d = np.sqrt(((pts - c) ** 2).sum(axis=1)).mean()
    if d < 1e-12:
        raise DegenerateConfiguration("all points coincide")
    s = np.sqrt(2.0) / d
    return np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])


def _apply_t(t: np.ndarray, pts: np.ndarray) -> np.ndarray:
    return pts @ t[:2, :2].T + t[:2, 2]


def _dlt_rows(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Stacked 2n x 9 DLT design matrix (works batched over leading dims)."""
    x, y = src[..., 0], src[..., 1]
    u, v = dst[..., 0], dst[..., 1]
    zero = np.zeros_like(x)
    one = np.ones_like(x)
    r1 = np.stack([x, y, one, zero, zero, zero, -u * x, -u * y, -u], axis=-1)
    r2 = np.stack([zero, zero, zero, x, y, one, -v * x, -v * y, -v], axis=-1)
    return np.concatenate([r1, r2], axis=-2)


def _solve_dlt(src_n: np.ndarray, dst_n: np.ndarray) -> np.ndarray:
    """Least-squares homography on pre-normalized coords via SVD.

    Uniqueness requires the 8th singular value of the (2n x 9) system to be
    nonzero; the returned null vector is sanity-checked against the SVD.
    """
    a = _dlt_rows(src_n, dst_n)
    _, svals, vt = np.linalg.svd(a)
    if svals[7] <= 1e-9 * svals[0]:
        raise DegenerateConfiguration("DLT system is rank-deficient (collinear points?)")
    h = vt[-1]
    smallest = svals[-1] if len(svals) == 9 else 0.0
    if abs(np.linalg.norm(h) - 1.0) > 1e-8 or np.linalg.norm(a @ h) > smallest + 1e-8 * svals[0]:
        raise DegenerateConfiguration("SVD residual check failed")
    return h.reshape(3, 3)


def _fit_exact(src: np.ndarray, dst: np.ndarray) -> Homography:
    ts, td = _normalization(src), _normalization(dst)
    hn = _solve_dlt(_apply_t(ts, src), _apply_t(td, dst))
    return Homography(np.linalg.inv(td) @ hn @ ts)


def _transfer_errors(h: np.ndarray, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Forward transfer error in pixels; supports batched h of shape (..., 3, 3)."""
    ph = np.hstack([src, np.ones((len(src), 1))])
    q = ph @ np.swapaxes(h, -1, -2)
    w = q[..., 2]
    bad = np.abs(w) < 1e-12
    w = np.where(bad, 1.0, w)
    proj = q[..., :2] / w[..., None]
    err = np.sqrt(((proj - dst) ** 2).sum(axis=-1))
    err[bad] = np.inf
    return err


def _noncollinear(quad: np.ndarray, eps: float = 1e-9) -> np.ndarray:
    """Batched test that no 3 of the 4 points are collinear. quad: (b, 4, 2)."""
    ok = np.ones(quad.shape[0], dtype=bool)
    for i, j, m in ((0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)):
        v1 = quad[:, j] - quad[:, i]
        v2 = quad[:, m] - quad[:, i]
        area = np.abs(v1[:, 0] * v2[:, 1] - v1[:, 1] * v2[:, 0])
        ok &= area > eps
    return ok


def estimate_homography(
    src: RasterImage | None,
    dst: RasterImage | None,
    matches: tuple[np.ndarray, np.ndarray] | Sequence[tuple] | None = None,
    *,
    seed: int = 0,
    iterations: int = RANSAC_ITERS,
    inlier_threshold: float = INLIER_THRESHOLD_PX,
) -> Homography:
    """Estimate the homography mapping ``src`` pixel coords to ``dst``.

    ``matches`` may be an (src_pts, dst_pts) array pair or a sequence of
    ((x, y), (x', y')) tuples; when absent the internal corner matcher runs
    on the two images. Raises TooFewMatches, DegenerateConfiguration or
    NoConsensus.
    """
    if matches is None:
        if src is None or dst is None:
            raise TooFewMatches("need either two images or explicit matches")
        src_pts, dst_pts = match_corners(src, dst)
    elif isinstance(matches, tuple) and len(matches) == 2 and not np.isscalar(matches[0][0]):
        src_pts = np.asarray(matches[0], dtype=np.float64).reshape(-1, 2)
        dst_pts = np.asarray(matches[1], dtype=np.float64).reshape(-1, 2)
    else:
        pairs = list(matches)
        src_pts = np.array([p[0] for p in pairs], dtype=np.float64)
        dst_pts = np.array([p[1] for p in pairs], dtype=np.float64)

    n = len(src_pts)
    if n < 4 or len(dst_pts) != n:
        raise TooFewMatches(f"need >= 4 match pairs, got {n}")

    if n == 4:
        if not (_noncollinear(src_pts[None])[0] and _noncollinear(dst_pts[None])[0]):
            raise DegenerateConfiguration("4-point sample has collinear points")
        return _fit_exact(src_pts, dst_pts)

    ts, td = _normalization(src_pts), _normalization(dst_pts)
    src_n, dst_n = _apply_t(ts, src_pts), _apply_t(td, dst_pts)
    td_inv = np.linalg.inv(td)

    rng = np.random.default_rng(seed)
    keys = rng.random((iterations, n))
    samples = np.argsort(keys, axis=1)[:, :4]  # 4 distinct indices per iteration

    valid = _noncollinear(src_pts[samples]) & _noncollinear(dst_pts[samples])

    a = _dlt_rows(src_n[samples], dst_n[samples])  # (iters, 8, 9)
    _, svals, vt = np.linalg.svd(a)
    valid &= svals[:, 7] > 1e-9 * svals[:, 0]
    hn = vt[:, -1, :].reshape(-1, 3, 3)
    h_all = td_inv @ hn @ ts  # pixel-space models, scale not yet normalized

    errs = _transfer_errors(h_all, src_pts, dst_pts)  # (iters, n)
    counts = (errs < inlier_threshold).sum(axis=1)
    counts[~valid] = 0
    best_idx = int(np.argmax(counts))  # first max: deterministic
    if counts[best_idx] < 4:
        raise NoConsensus("no model reached 4 inliers")

    inliers = errs[best_idx] < inlier_threshold
    try:
        refit = _fit_exact(src_pts[inliers], dst_pts[inliers])
    except DegenerateConfiguration:
        return Homography(h_all[best_idx])

    # Keep the refit only if it does not lose consensus.
    refit_count = int(
        (_transfer_errors(refit.h, src_pts, dst_pts) < inlier_threshold).sum()
    )
    if refit_count >= counts[best_idx]:
        return refit
    return Homography(h_all[best_idx])
