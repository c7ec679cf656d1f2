"""Readers and writers for the toolkit's on-disk types.

Binary tensor format (".rft", little-endian throughout):

    magic   4 bytes   b"RATK"
    version u16       currently 1
    dtype   u8        1 = float32 (the only supported element type)
    ndim    u8        1..4
    dims    u64 * ndim
    payload float32 * prod(dims), row-major

Images and masks are PNG; camera intrinsics live in a small JSON file with
keys fx, fy, cx, cy, depth_scale.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import (
    BadMagic,
    DecodeFailure,
    IoFailure,
    NonFiniteValue,
    ParseFailure,
    ShapeRejected,
    TruncatedPayload,
    UnsupportedVersion,
    WrongChannelCount,
)

MAGIC = b"RATK"
FORMAT_VERSION = 1
DTYPE_F32 = 1
MAX_NDIM = 4

_HEADER = struct.Struct("<4sHBB")


@dataclass(frozen=True)
class Tensor:
    """Row-major float32 tensor with 1 to 4 dimensions, all values finite."""

    values: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.values, dtype=np.float32)
        if arr.ndim < 1 or arr.ndim > MAX_NDIM:
            raise ShapeRejected(f"tensor must have 1..{MAX_NDIM} dims, got {arr.ndim}")
        if arr.size and not np.isfinite(arr).all():
            raise NonFiniteValue("tensor contains NaN or Inf")
        object.__setattr__(self, "values", arr)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def __eq__(self, other) -> bool:
        if not isinstance(other, Tensor):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(
            self.values.view(np.uint32), other.values.view(np.uint32)
        )


@dataclass(frozen=True, eq=False)
class RasterImage:
    """8-bit image, (h, w) grayscale or (h, w, 3) interleaved RGB."""

    pixels: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.pixels)
        if arr.dtype != np.uint8:
            raise WrongChannelCount(f"pixels must be uint8, got {arr.dtype}")
        if arr.ndim == 2:
            pass
        elif arr.ndim == 3 and arr.shape[2] == 3:
            pass
        else:
            raise WrongChannelCount(f"expected (h,w) or (h,w,3), got {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise WrongChannelCount("image must have at least one pixel")
        object.__setattr__(self, "pixels", arr)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return 1 if self.pixels.ndim == 2 else 3

    @property
    def size(self) -> tuple[int, int]:
        """(width, height)."""
        return (self.width, self.height)

    def to_gray(self) -> np.ndarray:
        """ITU-R 601 luma as float64 in [0, 255]."""
        px = self.pixels.astype(np.float64)
        if self.channels == 1:
            return px
        return 0.299 * px[:, :, 0] + 0.587 * px[:, :, 1] + 0.114 * px[:, :, 2]

    def digest(self) -> str:
        """Stable content hash used to key exported feature files."""
        import hashlib

        h = hashlib.sha256()
        h.update(f"{self.width}x{self.height}x{self.channels}:".encode())
        h.update(self.pixels.tobytes())
        return h.hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class GroundTruthMask:
    """8-bit grayscale mask, values meaningful as-is (no rescaling)."""

    values: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.values)
        if arr.dtype != np.uint8 or arr.ndim != 2:
            raise WrongChannelCount(f"mask must be 2-D uint8, got {arr.dtype} {arr.shape}")
        object.__setattr__(self, "values", arr)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    depth_scale: float = 0.001

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ParseFailure("focal lengths must be positive")
        if not self.depth_scale > 0:
            raise ParseFailure("depth_scale must be positive")


def write_tensor(t: Tensor, path: str | Path) -> None:
    """Serialize ``t``; ``read_tensor`` recovers it bit-exactly."""
    path = Path(path)
    arr = t.values
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, DTYPE_F32, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape)
    payload = arr.astype("<f4", copy=False).tobytes(order="C")
    try:
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(header + dims + payload)
        tmp.replace(path)
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e


def read_tensor(path: str | Path) -> Tensor:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise IoFailure(f"cannot read {path}: {e}") from e

    if len(raw) < 4 or raw[:4] != MAGIC:
        raise BadMagic(f"{path}: missing {MAGIC!r} magic")
    if len(raw) < _HEADER.size:
        raise TruncatedPayload(f"{path}: header cut short")
    _, version, dtype, ndim = _HEADER.unpack_from(raw)
    if version != FORMAT_VERSION:
        raise UnsupportedVersion(f"{path}: version {version}, expected {FORMAT_VERSION}")
    if dtype != DTYPE_F32:
        raise UnsupportedVersion(f"{path}: dtype tag {dtype}, only float32 (1) supported")
    if ndim < 1 or ndim > MAX_NDIM:
        raise ShapeRejected(f"{path}: ndim {ndim} outside 1..{MAX_NDIM}")

    offset = _HEADER.size
    dims_size = 8 * ndim
    if len(raw) < offset + dims_size:
        raise TruncatedPayload(f"{path}: dim list cut short")
    shape = struct.unpack_from(f"<{ndim}Q", raw, offset)
    offset += dims_size

    count = 1
    for d in shape:
        count *= d
    payload = raw[offset:]
    if len(payload) != 4 * count:
        raise TruncatedPayload(
            f"{path}: payload is {len(payload)} bytes, expected {4 * count}"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(shape)
    if data.size and not np.isfinite(data).all():
        raise NonFiniteValue(f"{path}: payload contains NaN or Inf")
    return Tensor(data.copy())


def load_image(path: str | Path) -> RasterImage:
    """Decode a PNG (or any PIL-readable) image as grayscale or RGB."""
    try:
        with Image.open(path) as im:
            if im.mode == "L":
                arr = np.asarray(im, dtype=np.uint8)
            else:
                arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (UnidentifiedImageError, OSError, SyntaxError) as e:
        raise DecodeFailure(f"cannot decode {path}: {e}") from e
    return RasterImage(arr)


def save_image(img: RasterImage, path: str | Path) -> None:
    try:
        Image.fromarray(img.pixels).save(Path(path), format="PNG")
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e


def load_mask(path: str | Path) -> GroundTruthMask:
    """Decode an 8-bit single-channel PNG, sample values preserved exactly."""
    try:
        with Image.open(path) as im:
            mode = im.mode
            if mode != "L":
                raise WrongChannelCount(
                    f"{path}: mask must be 8-bit grayscale, got mode {mode!r}"
                )
            arr = np.asarray(im, dtype=np.uint8)
    except WrongChannelCount:
        raise
    except (UnidentifiedImageError, OSError, SyntaxError) as e:
        raise DecodeFailure(f"cannot decode {path}: {e}") from e
    return GroundTruthMask(arr)


def save_mask(mask: GroundTruthMask, path: str | Path) -> None:
    try:
        Image.fromarray(mask.values, mode="L").save(Path(path), format="PNG")
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e


def load_depth(path: str | Path) -> np.ndarray:
    """16-bit depth PNG as a (h, w) uint16 array of raw depth units."""
    try:
        with Image.open(path) as im:
            if im.mode not in ("I", "I;16", "I;16B", "I;16L"):
                raise DecodeFailure(f"{path}: expected 16-bit grayscale, got {im.mode!r}")
            arr = np.asarray(im, dtype=np.uint32)
    except DecodeFailure:
        raise
    except (UnidentifiedImageError, OSError, SyntaxError) as e:
        raise DecodeFailure(f"cannot decode {path}: {e}") from e
    if arr.max(initial=0) > 0xFFFF:
        raise DecodeFailure(f"{path}: depth values exceed 16 bits")
    return arr.astype(np.uint16)


def save_depth(depth: np.ndarray, path: str | Path) -> None:
    arr = np.ascontiguousarray(depth, dtype="<u2")
    try:
        im = Image.new("I;16", (arr.shape[1], arr.shape[0]))
        im.frombytes(arr.tobytes())
        im.save(Path(path), format="PNG")
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e


_INTRINSICS_KEYS = ("fx", "fy", "cx", "cy", "depth_scale")


def load_intrinsics(path: str | Path) -> CameraIntrinsics:
    try:
        obj = json.loads(Path(path).read_text())
    except OSError as e:
        raise IoFailure(f"cannot read {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ParseFailure(f"{path}: {e}") from e
    missing = [k for k in _INTRINSICS_KEYS if k not in obj]
    if missing:
        raise ParseFailure(f"{path}: missing keys {missing}")
    return CameraIntrinsics(**{k: float(obj[k]) for k in _INTRINSICS_KEYS})


def save_intrinsics(intr: CameraIntrinsics, path: str | Path) -> None:
    obj = {k: getattr(intr, k) for k in _INTRINSICS_KEYS}
    Path(path).write_text(json.dumps(obj, indent=2) + "\n")
