from __future__ import annotations

import numpy as np
import pytest

from affordkit.correspondence import (
    ALL_TRANSFORMS,
    DIHEDRAL_CODES,
    DenseFeatureMap,
    DihedralTransform,
    FileFeatureExtractor,
    ToyGridExtractor,
    TransferConfig,
    feature_at,
    get_extractor,
    match_point,
    match_with_transforms,
    transfer_affordance,
    write_feature_map,
)
from affordkit.errors import (
    AllSourcesFailed,
    DimensionMismatch,
    MissingFeatureFile,
    OutOfBounds,
    ZeroFeature,
)
from affordkit.extraction import ContactPointSet
from affordkit.memory import AffordanceRecord

from conftest import make_textured


def fm_from(data: np.ndarray, image_h=None, image_w=None) -> DenseFeatureMap:
    c, gh, gw = data.shape
    return DenseFeatureMap(
        data=data.astype(np.float32),
        image_h=image_h if image_h is not None else gh,
        image_w=image_w if image_w is not None else gw,
    )


def injective_map(gh: int, gw: int) -> DenseFeatureMap:
    """One-hot feature per cell: perfectly distinguishable."""
    n = gh * gw
    data = np.eye(n, dtype=np.float32).reshape(n, gh, gw)
    return fm_from(data)


# --- feature_at -----------------------------------------------------------------


def test_feature_at_identity_grid():
    data = np.arange(2 * 3 * 4, dtype=np.float32).reshape(2, 3, 4)
    fm = fm_from(data)
    assert np.allclose(feature_at(fm, (2, 1)), data[:, 1, 2])


def test_feature_at_single_cell_grid():
    fm = fm_from(np.array([[[7.0]], [[9.0]]]), image_h=50, image_w=40)
    for p in [(0, 0), (39, 49), (13, 27)]:
        assert np.allclose(feature_at(fm, p), [7.0, 9.0])


def test_feature_at_bilinear_midpoint():
    data = np.array([[[1.0, 2.0], [3.0, 4.0]]])  # 1 channel, 2x2 grid
    fm = fm_from(data, image_h=2, image_w=2)
    assert np.allclose(feature_at(fm, (0.5, 0.5)), [2.5])  # mean of 4 cells


def test_feature_at_out_of_bounds():
    fm = injective_map(4, 4)
    with pytest.raises(OutOfBounds):
        feature_at(fm, (4, 0))
    with pytest.raises(OutOfBounds):
        feature_at(fm, (-0.5, 1))


# --- match_point ------------------------------------------------------------------


def test_self_match_identity_on_injective_features():
    fm = injective_map(5, 7)
    for p in [(0, 0), (6, 4), (3, 2)]:
        res = match_point(fm, p, fm)
        assert res.target_point == p
        assert res.similarity == pytest.approx(1.0)


def test_constant_target_ties_to_first_cell():
    src = injective_map(3, 3)
    tgt = fm_from(np.ones((9, 3, 3)))
    res = match_point(src, (2, 2), tgt)
    assert res.target_point == (0.0, 0.0)


def test_match_point_errors():
    a = injective_map(3, 3)
    b = fm_from(np.ones((4, 3, 3)))
    with pytest.raises(DimensionMismatch):
        match_point(a, (0, 0), b)
    z = fm_from(np.zeros((2, 3, 3)))
    with pytest.raises(ZeroFeature):
        match_point(z, (1, 1), z)


def brute_force_match(src_fm, p, tgt_fm):
    """Exhaustive scan oracle, independent per-cell evaluation."""
    q = feature_at(src_fm, p)
    qn = np.linalg.norm(q)
    best = (-np.inf, None)
    for gy in range(tgt_fm.grid_h):
        for gx in range(tgt_fm.grid_w):
            cell = tgt_fm.data[:, gy, gx].astype(np.float64)
            n = np.linalg.norm(cell)
            sim = float(cell @ q / (n * qn)) if n > 0 else -2.0
            if sim > best[0]:
                best = (sim, tgt_fm.cell_center(gx, gy))
    return best


def test_match_point_equals_bruteforce(rng):
    for _ in range(50):
        c = int(rng.integers(2, 8))
        gh, gw = int(rng.integers(2, 16)), int(rng.integers(2, 16))
        src = fm_from(rng.normal(size=(c, gh, gw)))
        tgt = fm_from(rng.normal(size=(c, int(rng.integers(2, 16)), int(rng.integers(2, 16)))))
        p = (float(rng.uniform(0, gw - 1)), float(rng.uniform(0, gh - 1)))
        res = match_point(src, p, tgt)
        sim, pt = brute_force_match(src, p, tgt)
        assert res.similarity == pytest.approx(sim, abs=1e-9)
        assert res.target_point == pt


def test_match_point_scale_invariance(rng):
    src = fm_from(rng.normal(size=(4, 8, 8)))
    tgt_data = rng.normal(size=(4, 10, 12))
    a = match_point(src, (3.3, 4.1), fm_from(tgt_data))
    b = match_point(src, (3.3, 4.1), fm_from(tgt_data * 37.5))
    assert a.target_point == b.target_point


# --- dihedral transforms ------------------------------------------------------------


def test_transform_codes_complete():
    assert DIHEDRAL_CODES == ("r0", "r90", "r180", "r270", "r0f", "r90f", "r180f", "r270f")


@pytest.mark.parametrize("code", DIHEDRAL_CODES)
def test_dihedral_round_trip_points(code):
    t = DihedralTransform(code)
    size = (7, 5)  # non-square
    for p in [(0.0, 0.0), (6.0, 4.0), (2.5, 3.25), (1.0, 4.0)]:
        q = t.apply_point(p, size)
        back = t.inverse().apply_point(q, t.output_size(size))
        assert back == pytest.approx(p, abs=1e-12)


@pytest.mark.parametrize("code", DIHEDRAL_CODES)
def test_dihedral_round_trip_arrays(code, rng):
    t = DihedralTransform(code)
    arr = rng.integers(0, 255, size=(5, 9, 3)).astype(np.uint8)
    back = t.inverse().apply_array(t.apply_array(arr))
    assert np.array_equal(back, arr)


@pytest.mark.parametrize("code", DIHEDRAL_CODES)
def test_dihedral_point_map_agrees_with_array_map(code, rng):
    """Moving a marked pixel through apply_array lands where apply_point says."""
    t = DihedralTransform(code)
    w, h = 9, 6
    arr = np.zeros((h, w), dtype=np.uint8)
    x, y = 7, 2
    arr[y, x] = 255
    out = t.apply_array(arr)
    qx, qy = t.apply_point((x, y), (w, h))
    assert out[int(qy), int(qx)] == 255
    assert out.sum() == 255


def test_r90_is_quarter_turn_clockwise():
    t = DihedralTransform("r90")
    # top-left of a (w=3, h=2) image moves to the top-right of a (2, 3) image
    assert t.apply_point((0, 0), (3, 2)) == (1.0, 0.0)
    assert t.output_size((3, 2)) == (2, 3)


def test_dihedral_orbit_is_closed(rng):
    """All 8 transforms of a generic image are distinct; r0 is identity."""
    img = make_textured(12, 9, seed=13)
    outs = {t.code: t.apply_image(img).pixels.tobytes() for t in ALL_TRANSFORMS}
    assert outs["r0"] == img.pixels.tobytes()
    assert len(set(outs.values())) == 8


# --- toygrid extractor ---------------------------------------------------------------


def _offset_permutation(fx: ToyGridExtractor, t: DihedralTransform) -> np.ndarray:
    """Channel permutation induced by a transform on the patch offsets."""
    inv = t.inverse()
    perm = np.empty(fx.channels, dtype=np.int64)
    offsets = {tuple(o): i for i, o in enumerate(fx.offsets)}
    for i, (dx, dy) in enumerate(fx.offsets):
        # Rotate the offset by the inverse linear part (flips/quarter turns).
        q = inv.apply_point((dx, dy), (1, 1))
        base = inv.apply_point((0.0, 0.0), (1, 1))
        moved = (q[0] - base[0], q[1] - base[1])
        perm[i] = offsets[moved]
    return perm


@pytest.mark.parametrize("code", DIHEDRAL_CODES)
def test_toygrid_is_equivariant(code):
    """Extracting from a transformed image equals transforming the feature
    grid and permuting patch channels accordingly."""
    fx = ToyGridExtractor()
    img = make_textured(20, 14, seed=21)
    t = DihedralTransform(code)
    direct = fx.extract(img, t)
    base = fx.extract(img)
    perm = _offset_permutation(fx, t)
    expected = np.stack([t.apply_array(base.data[perm[c]]) for c in range(fx.channels)])
    assert direct.data.shape == expected.shape
    assert np.allclose(direct.data, expected, atol=1e-6)


def test_toygrid_deterministic():
    fx = ToyGridExtractor()
    img = make_textured(16, 16, seed=3)
    a, b = fx.extract(img), fx.extract(img)
    assert np.array_equal(a.data, b.data)


def test_toygrid_self_match_is_exact():
    fx = ToyGridExtractor()
    img = make_textured(40, 30, seed=5)
    fm = fx.extract(img)
    for p in [(7, 9), (20, 15), (33, 4)]:
        res = match_point(fm, p, fm)
        assert res.target_point == (float(p[0]), float(p[1]))
        assert res.similarity == pytest.approx(1.0, abs=1e-6)


# --- match_with_transforms --------------------------------------------------------------


def test_identity_target_wins_with_r0():
    fx = ToyGridExtractor()
    img = make_textured(24, 18, seed=6)
    tgt_fm = fx.extract(img)
    res = match_with_transforms(img, (10, 8), tgt_fm, fx)
    assert res.transform.code == "r0"
    assert res.target_point == (10.0, 8.0)


@pytest.mark.parametrize("code", ["r90", "r180", "r0f", "r270f"])
def test_rotated_target_recovered(code):
    fx = ToyGridExtractor()
    img = make_textured(26, 18, seed=7)
    t = DihedralTransform(code)
    tgt_img = t.apply_image(img)
    tgt_fm = fx.extract(tgt_img)
    p = (9.0, 6.0)
    res = match_with_transforms(img, p, tgt_fm, fx)
    expected = t.apply_point(p, (img.width, img.height))  # coordinate-map oracle
    assert res.transform.code == code
    assert res.target_point == pytest.approx(expected, abs=1.0)  # within one cell
    assert res.similarity == pytest.approx(1.0, abs=1e-6)


def test_all_equal_similarity_ties_to_r0():
    class ConstantExtractor:
        name = "const"

        def extract(self, img, transform=ALL_TRANSFORMS[0]):
            w, h = transform.output_size((img.width, img.height))
            return DenseFeatureMap(
                data=np.ones((3, h, w), dtype=np.float32), image_h=h, image_w=w
            )

    img = make_textured(10, 8, seed=1)
    fx = ConstantExtractor()
    res = match_with_transforms(img, (4, 4), fx.extract(img), fx)
    assert res.transform.code == "r0"


# --- transfer_affordance ------------------------------------------------------------------


def _record_with_points(rid, img, pts):
    return AffordanceRecord(
        id=rid,
        category="cup",
        crop=img,
        contact_points=ContactPointSet(np.asarray(pts, dtype=np.float64)),
    )


def test_transfer_single_source_single_point():
    fx = ToyGridExtractor()
    img = make_textured(30, 24, seed=11)
    rec = _record_with_points("a", img, [[12.0, 9.0]])
    cfg = TransferConfig(rng_seed=5)
    final, best = transfer_affordance(
        [(rec, fx.extract(img))], img, fx.extract(img), fx, cfg
    )
    assert best.source_record_id == "a"
    assert best.transform.code == "r0"
    d = np.hypot(final.points[:, 0] - 12.0, final.points[:, 1] - 9.0)
    assert (d <= cfg.resample_radius + 1e-9).all()
    assert len(final) == cfg.resample_count


def test_transfer_picks_higher_mean_similarity():
    fx = ToyGridExtractor()
    tgt = make_textured(30, 24, seed=12)
    other = make_textured(30, 24, seed=99)
    rec_good = _record_with_points("good", tgt, [[10.0, 10.0], [12.0, 10.0]])
    rec_bad = _record_with_points("bad", other, [[10.0, 10.0], [12.0, 10.0]])
    sources = [
        (rec_bad, fx.extract(other)),
        (rec_good, fx.extract(tgt)),
    ]
    _, best = transfer_affordance(sources, tgt, fx.extract(tgt), fx, TransferConfig())
    assert best.source_record_id == "good"


def test_transfer_source_choice_matches_bruteforce(rng):
    fx = ToyGridExtractor()
    tgt = make_textured(28, 22, seed=30)
    tgt_fm = fx.extract(tgt)
    sources = []
    for i in range(5):
        img = make_textured(28, 22, seed=40 + i)
        pts = rng.uniform(6, 16, size=(3, 2))
        sources.append((_record_with_points(f"s{i}", img, pts), fx.extract(img)))

    _, best = transfer_affordance(sources, tgt, tgt_fm, fx, TransferConfig())

    # Oracle: recompute every source's mean best-similarity independently.
    means = []
    for rec, fm in sources:
        sims = [
            match_with_transforms(rec.crop, tuple(p), tgt_fm, fx, ALL_TRANSFORMS, fm).similarity
            for p in rec.contact_points.points
        ]
        means.append(float(np.mean(sims)))
    assert best.source_record_id == sources[int(np.argmax(means))][0].id


def test_transfer_avg_modes_agree_for_single_point():
    fx = ToyGridExtractor()
    img = make_textured(26, 20, seed=14)
    rec = _record_with_points("a", img, [[11.0, 7.0]])
    out = {}
    for mode in ("map-then-average", "average-then-map"):
        cfg = TransferConfig(averaging_mode=mode, rng_seed=9)
        final, _ = transfer_affordance([(rec, fx.extract(img))], img, fx.extract(img), fx, cfg)
        out[mode] = final.points
    assert np.array_equal(out["map-then-average"], out["average-then-map"])


def test_transfer_no_transforms_flag():
    fx = ToyGridExtractor()
    img = make_textured(26, 20, seed=15)
    rec = _record_with_points("a", img, [[9.0, 9.0]])
    cfg = TransferConfig(use_transforms=False)
    _, best = transfer_affordance([(rec, fx.extract(img))], img, fx.extract(img), fx, cfg)
    assert best.transform.code == "r0"


def test_transfer_all_sources_failed():
    fx = ToyGridExtractor()
    img = make_textured(26, 20, seed=16)
    flat = DenseFeatureMap(np.zeros((81, 20, 26), np.float32), image_h=20, image_w=26)

    class ZeroExtractor:
        name = "zero"

        def extract(self, im, transform=ALL_TRANSFORMS[0]):
            w, h = transform.output_size((im.width, im.height))
            return DenseFeatureMap(np.zeros((81, h, w), np.float32), image_h=h, image_w=w)

    rec = _record_with_points("a", img, [[9.0, 9.0]])
    with pytest.raises(AllSourcesFailed):
        transfer_affordance([(rec, flat)], img, flat, ZeroExtractor(), TransferConfig())
    with pytest.raises(AllSourcesFailed):
        transfer_affordance([], img, flat, ZeroExtractor(), TransferConfig())


# --- file-backed extractor -------------------------------------------------------------


def test_file_extractor_round_trip(tmp_path):
    fx = ToyGridExtractor()
    img = make_textured(18, 12, seed=17)
    for t in ALL_TRANSFORMS:
        write_feature_map(fx.extract(img, t), tmp_path, img.digest(), t.code, "toygrid")
    file_fx = FileFeatureExtractor("toygrid", tmp_path)
    for t in ALL_TRANSFORMS:
        a = file_fx.extract(img, t)
        b = fx.extract(img, t)
        assert np.array_equal(a.data, b.data)
        assert (a.image_h, a.image_w) == (b.image_h, b.image_w)


def test_file_extractor_missing_file(tmp_path):
    file_fx = FileFeatureExtractor("dift", tmp_path)
    with pytest.raises(MissingFeatureFile):
        file_fx.extract(make_textured(10, 10, seed=1))


def test_file_extractor_wrong_exporter_name(tmp_path):
    fx = ToyGridExtractor()
    img = make_textured(10, 10, seed=2)
    write_feature_map(fx.extract(img), tmp_path, img.digest(), "r0", "toygrid")
    with pytest.raises(MissingFeatureFile):
        FileFeatureExtractor("dift", tmp_path).extract(img)


def test_get_extractor_resolution(tmp_path):
    assert isinstance(get_extractor("toygrid"), ToyGridExtractor)
    assert isinstance(get_extractor("dift", tmp_path), FileFeatureExtractor)
    with pytest.raises(MissingFeatureFile):
        get_extractor("dift", None)
