from __future__ import annotations

import json

import numpy as np
import pytest

from affordkit.errors import DuplicateId
from affordkit.extraction import ContactPointSet
from affordkit.memory import (
    AffordanceMemory,
    AffordanceRecord,
    EmbeddingVector,
    Provenance,
)

from conftest import make_textured

# Seen/unseen category split used by the evaluation protocol.
SEEN = ["bottle", "bowl", "drawer", "cup", "door", "fork", "knife", "scissors", "wine glass"]
UNSEEN = ["axe", "badminton racket", "baseball bat", "frisbee", "hammer", "pen", "toothbrush"]


def make_record(rid: str, category: str, seed: int = 0, with_emb: bool = False):
    crop = make_textured(24, 18, seed=seed)
    pts = ContactPointSet(np.array([[5.0, 6.0], [7.0, 8.0]]), frame_index=3)
    emb = {}
    if with_emb:
        vec = np.random.default_rng(seed).normal(size=16).astype(np.float32)
        emb["toyenc"] = EmbeddingVector(vec, encoder_name="toyenc")
    return AffordanceRecord(
        id=rid,
        category=category,
        crop=crop,
        contact_points=pts,
        embeddings=emb,
        provenance=Provenance(video_id=f"vid-{rid}", frame_index=9),
    )


def test_add_and_categories(tmp_path):
    mem = AffordanceMemory.create(tmp_path / "m")
    mem.add(make_record("r1", "Knife"))
    assert len(mem) == 1
    assert mem.categories == {"knife"}  # categories normalize to lowercase


def test_duplicate_id(tmp_path):
    mem = AffordanceMemory.create(tmp_path / "m")
    mem.add(make_record("r1", "cup"))
    with pytest.raises(DuplicateId):
        mem.add(make_record("r1", "cup", seed=1))


def test_51_categories(tmp_path):
    mem = AffordanceMemory.create(tmp_path / "m")
    for i in range(51):
        mem.add(make_record(f"r{i:02d}", f"cat{i:02d}", seed=i))
    assert len(mem.categories) == 51
    assert len(mem) == 51


def test_filter(tmp_path):
    mem = AffordanceMemory.create(tmp_path / "m")
    for i in range(3):
        mem.add(make_record(f"k{i}", "knife", seed=i))
    mem.add(make_record("c0", "cup", seed=9))
    assert len(mem.filter("knife")) == 3
    assert mem.filter("unicorn") == []
    assert len(mem.filter()) == 4


def test_has_category_case_insensitive_and_split(tmp_path):
    mem = AffordanceMemory.create(tmp_path / "m")
    for i, cat in enumerate(SEEN):
        mem.add(make_record(f"s{i}", cat, seed=i))
    assert mem.has_category("Knife")
    for cat in UNSEEN:
        assert not mem.has_category(cat)
    assert not AffordanceMemory.create(tmp_path / "empty").has_category("knife")


def test_persistence_round_trip(tmp_path):
    mem = AffordanceMemory.create(tmp_path / "m")
    rec = make_record("r1", "cup", seed=4, with_emb=True)
    mem.add(rec)

    reopened = AffordanceMemory.open(tmp_path / "m")
    back = reopened.get("r1")
    assert back.id == rec.id and back.category == rec.category
    assert np.array_equal(back.crop.pixels, rec.crop.pixels)
    assert np.array_equal(back.contact_points.points, rec.contact_points.points)
    assert back.contact_points.frame_index == 3
    assert back.provenance == rec.provenance
    assert np.array_equal(
        back.embeddings["toyenc"].values.view(np.uint32),
        rec.embeddings["toyenc"].values.view(np.uint32),
    )


def test_index_schema(tmp_path):
    mem = AffordanceMemory.create(tmp_path / "m")
    mem.add(make_record("r1", "cup", with_emb=True))
    obj = json.loads((tmp_path / "m" / "index.json").read_text())
    assert obj["version"] == 1
    assert obj["records"] == [
        {"id": "r1", "category": "cup", "dir": "records/r1", "encoders": ["toyenc"]}
    ]


def test_verify_clean_and_corrupted(tmp_path):
    mem = AffordanceMemory.create(tmp_path / "m")
    mem.add(make_record("r1", "cup"))
    mem.add(make_record("r2", "cup", seed=2))
    assert mem.verify() == []
    (tmp_path / "m" / "records" / "r2" / "crop.png").unlink()
    problems = AffordanceMemory.open(tmp_path / "m").verify()
    assert any("crop.png" in p for p in problems)


def test_verify_flags_orphan(tmp_path):
    mem = AffordanceMemory.create(tmp_path / "m")
    mem.add(make_record("r1", "cup"))
    (tmp_path / "m" / "records" / "ghost").mkdir()
    problems = mem.verify()
    assert any("orphan" in p for p in problems)


def test_crash_between_record_and_index_leaves_index_consistent(tmp_path, monkeypatch):
    mem = AffordanceMemory.create(tmp_path / "m")
    mem.add(make_record("r1", "cup"))

    def boom():
        raise RuntimeError("injected crash")

    monkeypatch.setattr(mem, "_write_index", boom)
    with pytest.raises(RuntimeError):
        mem.add(make_record("r2", "cup", seed=2))
    monkeypatch.undo()

    reopened = AffordanceMemory.open(tmp_path / "m")
    assert reopened.ids == ["r1"]  # index never references the half-written record
    problems = reopened.verify()
    assert all("missing" not in p for p in problems)
    assert any("orphan" in p for p in problems)  # the stray r2 directory is reported


def test_cache_embedding_updates_index(tmp_path):
    mem = AffordanceMemory.create(tmp_path / "m")
    mem.add(make_record("r1", "cup"))
    emb = EmbeddingVector(np.ones(8, dtype=np.float32), encoder_name="enc-a")
    mem.cache_embedding("r1", emb)
    reopened = AffordanceMemory.open(tmp_path / "m")
    assert "enc-a" in reopened.get("r1").embeddings


def test_contact_points_must_fit_crop():
    with pytest.raises(ValueError):
        AffordanceRecord(
            id="bad",
            category="cup",
            crop=make_textured(10, 10, seed=0),
            contact_points=ContactPointSet(np.array([[50.0, 5.0]])),
        )
