"""On-disk affordance memory.

Layout:

    <root>/index.json                     {"version": 1, "records": [...]}
    <root>/records/<id>/crop.png
    <root>/records/<id>/points.json       contact points in crop coordinates
    <root>/records/<id>/emb-<encoder>.rft cached embeddings, one per encoder

The index is always written last via temp-and-rename, so a crash between a
record write and the index write can leave an orphan directory but never a
dangling index entry. Writers serialize on a lock file; readers need no lock.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from filelock import FileLock

from .errors import DuplicateId, IoFailure, MemoryInconsistent, NonFiniteValue, ParseFailure
from .extraction import ContactPointSet
from .tensorio import RasterImage, Tensor, load_image, read_tensor, save_image, write_tensor

INDEX_VERSION = 1
_ID_RE = re.compile(r"^[A-Za-z0-9][A-Za-z0-9._-]*$")


@dataclass(frozen=True, eq=False)
class EmbeddingVector:
    values: np.ndarray
    encoder_name: str
    norm: float = field(init=False)

    def __post_init__(self):
        arr = np.ascontiguousarray(self.values, dtype=np.float32).reshape(-1)
        if arr.size == 0:
            raise ValueError("embedding must be non-empty")
        if not np.isfinite(arr).all():
            raise NonFiniteValue("embedding contains NaN or Inf")
        object.__setattr__(self, "values", arr)
        object.__setattr__(self, "norm", float(np.linalg.norm(arr.astype(np.float64))))

    def __len__(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class Provenance:
    video_id: str = ""
    frame_index: int = 0


@dataclass
class AffordanceRecord:
    id: str
    category: str
    crop: RasterImage
    contact_points: ContactPointSet
    embeddings: dict[str, EmbeddingVector] = field(default_factory=dict)
    provenance: Provenance = field(default_factory=Provenance)

    def __post_init__(self):
        if not _ID_RE.match(self.id):
            raise ValueError(f"record id {self.id!r} is not filesystem-safe")
        if not self.category.strip():
            raise ValueError("category must be non-empty")
        self.category = self.category.strip().lower()
        pts = self.contact_points.points
        if (
            (pts[:, 0] < 0).any()
            or (pts[:, 0] >= self.crop.width).any()
            or (pts[:, 1] < 0).any()
            or (pts[:, 1] >= self.crop.height).any()
        ):
            raise ValueError("contact points must lie inside the crop")


class AffordanceMemory:
    """Single-writer, multi-reader record store with category gating support."""

    def __init__(self, root: Path, entries: list[dict]):
        self.root = root
        self._entries = entries  # index order == insertion order

    # -- lifecycle -------------------------------------------------------

    @classmethod
    def create(cls, root: str | Path) -> "AffordanceMemory":
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        (root / "records").mkdir(exist_ok=True)
        mem = cls(root, [])
        if not (root / "index.json").exists():
            mem._write_index()
        else:
            mem._entries = cls.open(root)._entries
        return mem

    @classmethod
    def open(cls, root: str | Path) -> "AffordanceMemory":
        root = Path(root)
        index_file = root / "index.json"
        try:
            obj = json.loads(index_file.read_text())
        except OSError as e:
            raise IoFailure(f"cannot open memory at {root}: {e}") from e
        except json.JSONDecodeError as e:
            raise ParseFailure(f"{index_file}: {e}") from e
        if obj.get("version") != INDEX_VERSION:
            raise ParseFailure(f"{index_file}: unsupported index version {obj.get('version')}")
        return cls(root, list(obj.get("records", [])))

    # -- index helpers ------------------------------------------------------

    @property
    def _lock(self) -> FileLock:
        return FileLock(str(self.root / ".write.lock"))

    def _write_index(self) -> None:
        payload = json.dumps(
            {"version": INDEX_VERSION, "records": self._entries}, indent=2
        )
        tmp = self.root / "index.json.tmp"
        tmp.write_text(payload + "\n")
        os.replace(tmp, self.root / "index.json")

    def _entry(self, record_id: str) -> dict | None:
        for e in self._entries:
            if e["id"] == record_id:
                return e
        return None

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def ids(self) -> list[str]:
        return [e["id"] for e in self._entries]

    @property
    def categories(self) -> set[str]:
        return {e["category"] for e in self._entries}

    # -- operations -------------------------------------------------------

    def add(self, rec: AffordanceRecord) -> None:
        """Persist a record; the index entry is committed last."""
        with self._lock:
            if self._entry(rec.id) is not None:
                raise DuplicateId(f"record {rec.id!r} already present")
            rec_dir = self.root / "records" / rec.id
            try:
                rec_dir.mkdir(parents=True, exist_ok=False)
            except OSError as e:
                raise IoFailure(f"cannot create {rec_dir}: {e}") from e
            save_image(rec.crop, rec_dir / "crop.png")
            points_payload = {
                "points": [[float(x), float(y)] for x, y in rec.contact_points.points],
                "frame_index": rec.contact_points.frame_index,
                "provenance": {
                    "video_id": rec.provenance.video_id,
                    "frame_index": rec.provenance.frame_index,
                },
            }
            (rec_dir / "points.json").write_text(json.dumps(points_payload, indent=2) + "\n")
            for name, emb in sorted(rec.embeddings.items()):
                write_tensor(Tensor(emb.values), rec_dir / f"emb-{name}.rft")
            self._entries.append(
                {
                    "id": rec.id,
                    "category": rec.category,
                    "dir": f"records/{rec.id}",
                    "encoders": sorted(rec.embeddings),
                }
            )
            self._write_index()

    def filter(self, category: str | None = None) -> list[AffordanceRecord]:
        """Records with an exact (lowercased) category match; all when None."""
        wanted = category.strip().lower() if category is not None else None
        out = []
        for e in self._entries:
            if wanted is None or e["category"] == wanted:
                out.append(self.get(e["id"]))
        return out

    def has_category(self, category: str) -> bool:
        return category.strip().lower() in self.categories

    def get(self, record_id: str) -> AffordanceRecord:
        e = self._entry(record_id)
        if e is None:
            raise KeyError(record_id)
        rec_dir = self.root / e["dir"]
        crop = load_image(rec_dir / "crop.png")
        try:
            pobj = json.loads((rec_dir / "points.json").read_text())
        except OSError as err:
            raise IoFailure(f"{rec_dir}/points.json: {err}") from err
        pts = ContactPointSet(
            np.array(pobj["points"], dtype=np.float64),
            frame_index=int(pobj.get("frame_index", 0)),
        )
        prov = Provenance(
            video_id=str(pobj.get("provenance", {}).get("video_id", "")),
            frame_index=int(pobj.get("provenance", {}).get("frame_index", 0)),
        )
        embeddings = {}
        for name in e.get("encoders", []):
            t = read_tensor(rec_dir / f"emb-{name}.rft")
            embeddings[name] = EmbeddingVector(t.values.reshape(-1), encoder_name=name)
        return AffordanceRecord(
            id=e["id"],
            category=e["category"],
            crop=crop,
            contact_points=pts,
            embeddings=embeddings,
            provenance=prov,
        )

    def cache_embedding(self, record_id: str, emb: EmbeddingVector) -> None:
        """Persist a computed embedding and register it in the index."""
        with self._lock:
            e = self._entry(record_id)
            if e is None:
                raise KeyError(record_id)
            rec_dir = self.root / e["dir"]
            write_tensor(Tensor(emb.values), rec_dir / f"emb-{emb.encoder_name}.rft")
            if emb.encoder_name not in e["encoders"]:
                e["encoders"] = sorted(e["encoders"] + [emb.encoder_name])
                self._write_index()

    def verify(self) -> list[str]:
        """fsck-style consistency check; returns a list of problems (empty = ok)."""
        problems: list[str] = []
        seen_ids: set[str] = set()
        referenced: set[str] = set()
        for e in self._entries:
            rid = e.get("id", "<missing>")
            if rid in seen_ids:
                problems.append(f"duplicate id in index: {rid}")
            seen_ids.add(rid)
            rec_dir = self.root / e.get("dir", f"records/{rid}")
            referenced.add(rec_dir.name)
            for fname in ["crop.png", "points.json"] + [
                f"emb-{n}.rft" for n in e.get("encoders", [])
            ]:
                if not (rec_dir / fname).is_file():
                    problems.append(f"{rid}: missing file {rec_dir / fname}")
            if (rec_dir / "crop.png").is_file() and (rec_dir / "points.json").is_file():
                try:
                    rec = self.get(rid)
                    del rec
                except Exception as err:  # malformed payloads are inconsistencies
                    problems.append(f"{rid}: unreadable record ({err})")
        records_root = self.root / "records"
        if records_root.is_dir():
            for d in sorted(records_root.iterdir()):
                if d.is_dir() and d.name not in referenced:
                    problems.append(f"orphan record directory not in index: {d}")
        return problems

    def verify_strict(self) -> None:
        problems = self.verify()
        if problems:
            raise MemoryInconsistent("; ".join(problems))
