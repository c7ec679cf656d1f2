"""Lift a 2-D contact point to 3-D and pick the nearest grasp candidate.

Candidates arrive from an external grasp generator as JSON; selection is the
candidate whose translation is closest (Euclidean) to the deprojected
contact point.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    EmptyCandidateSet,
    IoFailure,
    NonOrthonormalRotation,
    ParseFailure,
    SelectionTooFar,
    ZeroDepth,
)
from .tensorio import CameraIntrinsics

ORTHONORMAL_TOL = 1e-4


@dataclass(frozen=True, eq=False)
class GraspCandidate:
    rotation: np.ndarray  # 3x3, orthonormal with det +1
    translation: np.ndarray  # 3-vector, meters
    width: float
    score: float | None = None

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if r.shape != (3, 3):
            raise NonOrthonormalRotation(f"rotation must be 3x3, got {r.shape}")
        if np.abs(r @ r.T - np.eye(3)).max() > ORTHONORMAL_TOL:
            raise NonOrthonormalRotation("rotation rows are not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > ORTHONORMAL_TOL:
            raise NonOrthonormalRotation(f"rotation determinant {np.linalg.det(r):.6f} != +1")
        if self.width < 0:
            raise ParseFailure("gripper width must be >= 0")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)


@dataclass(frozen=True, eq=False)
class ContactPoint3D:
    xyz: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.xyz, dtype=np.float64).reshape(3)
        if not np.isfinite(v).all():
            raise ZeroDepth("3-D contact point must be finite")
        if v[2] <= 0:
            raise ZeroDepth("3-D contact point must have positive depth")
        object.__setattr__(self, "xyz", v)


def deproject_pixel(
    u: float, v: float, depth: float, intr: CameraIntrinsics
) -> ContactPoint3D:
    """Pinhole back-projection of pixel (u, v) at a raw depth reading."""
    if depth <= 0:
        raise ZeroDepth(f"depth reading {depth} at ({u},{v}) is not positive")
    z = float(depth) * intr.depth_scale
    x = (float(u) - intr.cx) * z / intr.fx
    y = (float(v) - intr.cy) * z / intr.fy
    return ContactPoint3D(np.array([x, y, z]))


def project_point(p: ContactPoint3D, intr: CameraIntrinsics) -> tuple[float, float]:
    """Forward pinhole projection; inverse of deproject_pixel."""
    x, y, z = p.xyz
    return (intr.fx * x / z + intr.cx, intr.fy * y / z + intr.cy)


def sample_depth(depth_image: np.ndarray, u: int, v: int, window: int = 5) -> float:
    """Median raw depth over a window around (u, v), ignoring zero readings."""
    h, w = depth_image.shape
    r = window // 2
    patch = depth_image[
        max(0, v - r) : min(h, v + r + 1), max(0, u - r) : min(w, u + r + 1)
    ]
    vals = patch[patch > 0]
    if vals.size == 0:
        raise ZeroDepth(f"no valid depth reading around ({u},{v})")
    return float(np.median(vals))


def select_grasp(
    candidates: list[GraspCandidate],
    p: ContactPoint3D,
    max_distance: float | None = None,
) -> GraspCandidate:
    """Candidate with minimal translational distance to ``p``.

    Ties prefer the higher score, then the smaller list index. With
    ``max_distance`` set, a winner farther than the cutoff raises
    SelectionTooFar.
    """
    if not candidates:
        raise EmptyCandidateSet("no grasp candidates")
    dists = np.array(
        [float(np.linalg.norm(c.translation - p.xyz)) for c in candidates]
    )
    best_d = dists.min()
    tied = np.nonzero(dists == best_d)[0]
    if len(tied) > 1:
        scores = [
            candidates[i].score if candidates[i].score is not None else -np.inf
            for i in tied
        ]
        best_idx = int(tied[int(np.argmax(scores))])  # argmax keeps first on ties
    else:
        best_idx = int(tied[0])
    if max_distance is not None and best_d > max_distance:
        raise SelectionTooFar(
            f"nearest candidate is {best_d:.4f} m away, cutoff {max_distance} m"
        )
    return candidates[best_idx]


def load_grasp_candidates(path: str | Path) -> list[GraspCandidate]:
    """Parse {"grasps": [{"R", "t", "width", "score"?}, ...]} with validation."""
    try:
        obj = json.loads(Path(path).read_text())
    except OSError as e:
        raise IoFailure(f"cannot read {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ParseFailure(f"{path}: {e}") from e
    if not isinstance(obj, dict) or "grasps" not in obj:
        raise ParseFailure(f"{path}: expected a top-level 'grasps' list")
    out = []
    for i, g in enumerate(obj["grasps"]):
        try:
            out.append(
                GraspCandidate(
                    rotation=np.array(g["R"], dtype=np.float64),
                    translation=np.array(g["t"], dtype=np.float64),
                    width=float(g["width"]),
                    score=float(g["score"]) if g.get("score") is not None else None,
                )
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ParseFailure(f"{path}: grasp #{i}: {e}") from e
    return out
