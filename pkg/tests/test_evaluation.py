from __future__ import annotations

import json

import numpy as np
import pytest

from affordkit.errors import (
    EmptyMaskRegion,
    EmptyPrediction,
    InvalidPrediction,
    MissingMask,
    MissingPrediction,
)
from affordkit.evaluation import (
    Prediction,
    evaluate_dataset,
    heatmap_top_points,
    load_manifest,
    load_predictions,
    mask_contour,
    metric_dtm,
    metric_nss,
    metric_sr,
    render_overlay,
    sr_threshold_curve,
)
from affordkit.tensorio import GroundTruthMask, RasterImage, save_image, save_mask

from conftest import disc_mask, make_textured


def mask_from(arr) -> GroundTruthMask:
    return GroundTruthMask(np.asarray(arr, dtype=np.uint8))


# --- SR ----------------------------------------------------------------------


def test_sr_all_inside():
    m = mask_from(np.full((10, 10), 200))
    pts = [(1, 1), (2, 3), (4, 4), (9, 9), (0, 5)]
    assert metric_sr(pts, m) == 1.0


def test_sr_counts_fraction():
    m = np.zeros((10, 10), dtype=np.uint8)
    m[0, 0] = m[0, 1] = 200
    pts = [(0, 0), (1, 0), (5, 5), (6, 6), (7, 7)]
    assert metric_sr(pts, mask_from(m)) == pytest.approx(0.4)


def test_sr_threshold_is_strict():
    m = np.zeros((5, 5), dtype=np.uint8)
    m[2, 2] = 122
    assert metric_sr([(2, 2)], mask_from(m), threshold=122) == 0.0
    m[2, 2] = 123
    assert metric_sr([(2, 2)], mask_from(m), threshold=122) == 1.0


def test_sr_empty_prediction():
    with pytest.raises(EmptyPrediction):
        metric_sr(np.zeros((0, 2)), mask_from(np.zeros((5, 5))))


def test_sr_out_of_bounds_point():
    with pytest.raises(InvalidPrediction):
        metric_sr([(9, 2)], mask_from(np.zeros((5, 5))))


# --- NSS ----------------------------------------------------------------------


def test_nss_at_maximum():
    m = np.zeros((6, 6), dtype=np.uint8)
    m[3, 3] = 180
    assert metric_nss([(3, 3)], mask_from(m)) == 1.0


def test_nss_zero_points():
    m = np.zeros((6, 6), dtype=np.uint8)
    m[0, 0] = 255
    assert metric_nss([(5, 5)], mask_from(m)) == 0.0


def test_nss_direct_arithmetic():
    m = np.zeros((6, 6), dtype=np.uint8)
    m[1, 1], m[2, 2] = 255, 102
    assert metric_nss([(1, 1), (2, 2)], mask_from(m)) == pytest.approx(0.7)


def test_nss_all_zero_mask_guard():
    assert metric_nss([(1, 1)], mask_from(np.zeros((4, 4)))) == 0.0


def test_nss_scaling_invariance():
    rng = np.random.default_rng(8)
    base = rng.integers(0, 52, size=(12, 12)).astype(np.uint8)
    base[5, 5] = 51
    pts = [(2, 3), (5, 5), (7, 1)]
    a = metric_nss(pts, mask_from(base))
    b = metric_nss(pts, mask_from(base.astype(np.int64) * 5))  # still within uint8
    assert a == pytest.approx(b, abs=1e-12)


# --- DTM ----------------------------------------------------------------------


def test_dtm_inside_is_zero():
    m = disc_mask(20, 20, 10, 10, 5, value=200)
    assert metric_dtm([(10, 10), (12, 10)], m) == 0.0


def test_dtm_square_mask_example():
    m = np.zeros((100, 100), dtype=np.uint8)
    m[40:60, 40:60] = 255  # rows/cols 40..59
    val = metric_dtm([(20, 50)], mask_from(m))
    assert val == pytest.approx(20.0 / np.hypot(100, 100), abs=1e-12)


def test_dtm_empty_region():
    with pytest.raises(EmptyMaskRegion):
        metric_dtm([(1, 1)], mask_from(np.full((5, 5), 50)))


def _dtm_oracle(points, mask_values, threshold, w, h):
    """All-pairs oracle with its own contour derivation."""
    above = mask_values.astype(int) > threshold
    contour = []
    for y in range(h):
        for x in range(w):
            if not above[y, x]:
                continue
            on_border = x == 0 or y == 0 or x == w - 1 or y == h - 1
            neigh_below = any(
                not above[y + dy, x + dx]
                for dy, dx in ((0, 1), (0, -1), (1, 0), (-1, 0))
                if 0 <= y + dy < h and 0 <= x + dx < w
            )
            if on_border or neigh_below:
                contour.append((x, y))
    total = 0.0
    for x, y in points:
        if above[y, x]:
            continue
        total += min(np.hypot(cx - x, cy - y) for cx, cy in contour)
    return total / len(points) / np.hypot(w, h)


def test_dtm_matches_oracle_random(rng):
    for _ in range(30):
        w, h = int(rng.integers(6, 32)), int(rng.integers(6, 32))
        m = (rng.random((h, w)) < 0.25).astype(np.uint8) * 255
        if not (m > 122).any():
            m[h // 2, w // 2] = 255
        pts = np.stack(
            [rng.integers(0, w, size=4), rng.integers(0, h, size=4)], axis=1
        )
        got = metric_dtm(pts, mask_from(m))
        want = _dtm_oracle([tuple(p) for p in pts], m, 122, w, h)
        assert got == pytest.approx(want, abs=1e-9)


def test_metrics_translation_equivariance(rng):
    w = h = 40
    m = np.zeros((h, w), dtype=np.uint8)
    m[10:18, 8:20] = rng.integers(123, 256, size=(8, 12))
    pts = [(4, 6), (12, 14), (25, 30)]
    dx, dy = 7, 5
    m2 = np.zeros((h, w), dtype=np.uint8)
    m2[10 + dy : 18 + dy, 8 + dx : 20 + dx] = m[10:18, 8:20]
    pts2 = [(x + dx, y + dy) for x, y in pts]
    assert metric_sr(pts, mask_from(m)) == metric_sr(pts2, mask_from(m2))
    assert metric_nss(pts, mask_from(m)) == pytest.approx(metric_nss(pts2, mask_from(m2)))
    assert metric_dtm(pts, mask_from(m)) == pytest.approx(metric_dtm(pts2, mask_from(m2)))


def test_contour_of_full_mask_is_border():
    m = mask_from(np.full((4, 5), 255))
    contour = {tuple(c) for c in mask_contour(m)}
    expected = {
        (x, y)
        for y in range(4)
        for x in range(5)
        if x in (0, 4) or y in (0, 3)
    }
    assert contour == expected


# --- dataset harness ---------------------------------------------------------------


def _write_dataset(tmp_path, images):
    """images: {image_id: (mask_values, points, category, seen)}"""
    man = {}
    (tmp_path / "masks").mkdir(exist_ok=True)
    (tmp_path / "images").mkdir(exist_ok=True)
    pred_lines = []
    for image_id, (mask_vals, points, category, seen) in images.items():
        mask = mask_from(mask_vals)
        save_mask(mask, tmp_path / "masks" / f"{image_id}.png")
        save_image(
            make_textured(mask.width, mask.height, seed=1),
            tmp_path / "images" / f"{image_id}.png",
        )
        man[image_id] = {
            "image": f"images/{image_id}.png",
            "mask": f"masks/{image_id}.png",
            "category": category,
            "seen": seen,
        }
        if points is not None:
            pred_lines.append(
                json.dumps({"image_id": image_id, "method": "t", "points": points})
            )
    (tmp_path / "manifest.json").write_text(json.dumps(man))
    (tmp_path / "preds.jsonl").write_text("\n".join(pred_lines) + "\n")
    return tmp_path / "preds.jsonl", tmp_path / "manifest.json"


def _solid(v, w=10, h=10):
    return np.full((h, w), v, dtype=np.uint8)


def test_evaluate_single_image_full_sr(tmp_path):
    preds, man = _write_dataset(
        tmp_path, {"a": (_solid(200), [[1, 1], [2, 2]], "cup", True)}
    )
    report = evaluate_dataset(preds, man)
    assert report.overall["sr_percent"] == pytest.approx(100.0)
    assert report.overall["images"] == 1


def test_evaluate_two_categories_aggregate(tmp_path):
    preds, man = _write_dataset(
        tmp_path,
        {
            "a": (_solid(200), [[1, 1]], "cup", True),
            "b": (_solid(1, 10, 10) + np.diag(np.full(10, 250)).astype(np.uint8), [[0, 1]], "axe", False),
        },
    )
    report = evaluate_dataset(preds, man)
    assert report.per_category["cup"]["sr_percent"] == pytest.approx(100.0)
    assert report.per_category["axe"]["sr_percent"] == pytest.approx(0.0)
    assert report.overall["sr_percent"] == pytest.approx(50.0)
    assert report.seen_split["seen"]["images"] == 1
    assert report.seen_split["unseen"]["images"] == 1


def test_evaluate_missing_mask_and_prediction(tmp_path):
    preds, man = _write_dataset(
        tmp_path,
        {
            "a": (_solid(200), [[1, 1]], "cup", True),
            "b": (_solid(200), None, "cup", True),  # no prediction
        },
    )
    with open(preds, "a") as f:
        f.write(json.dumps({"image_id": "ghost", "method": "t", "points": [[0, 0]]}) + "\n")
    with pytest.raises(MissingMask):
        evaluate_dataset(preds, man)
    report = evaluate_dataset(preds, man, allow_partial=True)
    assert report.skipped["missing_mask"] == ["ghost"]
    assert report.skipped["missing_prediction"] == ["b"]
    assert report.overall["images"] == 1

    # Remove the ghost prediction: the missing prediction alone still fails.
    lines = preds.read_text().splitlines()
    preds.write_text("\n".join(l for l in lines if "ghost" not in l) + "\n")
    with pytest.raises(MissingPrediction):
        evaluate_dataset(preds, man)


def test_evaluate_fixture_hand_computed(tmp_path):
    """Frozen hand-computed metrics for a small planted dataset."""
    m = np.zeros((10, 10), dtype=np.uint8)
    m[4:7, 4:7] = 140  # above 122; contour = whole 3x3 block edge
    preds, man = _write_dataset(
        tmp_path,
        {
            "x": (m, [[5, 5], [0, 0], [6, 6], [4, 4], [9, 9]], "cup", True),
        },
    )
    report = evaluate_dataset(preds, man)
    # Hand-computed: SR 3/5; NSS (140*3/140)/5 = 0.6; DTM distances:
    # (0,0)->nearest contour (4,4): sqrt(32); (9,9)->(6,6): sqrt(18); others 0.
    assert report.overall["sr_percent"] == pytest.approx(60.0)
    assert report.overall["nss"] == pytest.approx(0.6)
    want_dtm = (np.sqrt(32) + np.sqrt(18)) / 5 / np.hypot(10, 10)
    assert report.overall["dtm"] == pytest.approx(want_dtm, abs=1e-12)


def test_sr_curve_monotone_and_bounds(tmp_path):
    m = np.zeros((10, 10), dtype=np.uint8)
    m[0, 0], m[0, 1], m[0, 2] = 50, 150, 255
    preds, man = _write_dataset(
        tmp_path, {"a": (m, [[0, 0], [1, 0], [2, 0]], "cup", True)}
    )
    curve = sr_threshold_curve(preds, man, [0, 49, 50, 122, 254, 255])
    srs = [sr for _, sr in curve]
    assert srs == sorted(srs, reverse=True)
    assert curve[0][1] == pytest.approx(1.0)  # threshold 0: all positive values count
    assert curve[-1][1] == pytest.approx(0.0)  # threshold 255: strict > excludes 255
    assert dict(curve)[122] == pytest.approx(2 / 3)


def test_sr_curve_threshold_range_check(tmp_path):
    preds, man = _write_dataset(tmp_path, {"a": (_solid(200), [[1, 1]], "cup", True)})
    with pytest.raises(ValueError):
        sr_threshold_curve(preds, man, [256])


# --- predictions io -----------------------------------------------------------------


def test_load_predictions(tmp_path):
    p = tmp_path / "p.jsonl"
    p.write_text('{"image_id": "a", "method": "m", "points": [[1, 2], [3, 4]]}\n')
    preds = load_predictions(p)
    assert preds[0].image_id == "a"
    assert np.array_equal(preds[0].points, [[1, 2], [3, 4]])


def test_prediction_point_cap():
    with pytest.raises(InvalidPrediction):
        Prediction(image_id="a", points=np.zeros((6, 2)))
    with pytest.raises(EmptyPrediction):
        Prediction(image_id="a", points=np.zeros((0, 2)))


# --- overlays + heatmap helper ---------------------------------------------------------


def test_overlay_point_disc_no_mask():
    img = RasterImage(np.zeros((30, 30, 3), dtype=np.uint8))
    out = render_overlay(img, [(15, 15)])
    changed = np.nonzero((out.pixels != img.pixels).any(axis=2))
    ys, xs = changed
    assert len(ys) > 0
    assert (np.hypot(xs - 15, ys - 15) <= 5).all()


def test_overlay_blend_exactly_where_mask_positive():
    img = make_textured(24, 24, seed=2)
    mask = disc_mask(24, 24, 12, 12, 9, value=77)  # wider than the point disc
    out = render_overlay(img, [(12, 12)], mask)
    points_only = render_overlay(img, [(12, 12)])  # same points, no mask
    diff = (out.pixels != points_only.pixels).any(axis=2)
    assert diff[mask.values > 0].any()
    assert not diff[mask.values == 0].any()


def test_overlay_deterministic(tmp_path):
    img = make_textured(25, 25, seed=3)
    mask = disc_mask(25, 25, 12, 12, 6)
    a = render_overlay(img, [(12, 12)], mask)
    b = render_overlay(img, [(12, 12)], mask)
    save_image(a, tmp_path / "a.png")
    save_image(b, tmp_path / "b.png")
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()


def test_heatmap_top_points():
    hm = np.array([[0.1, 0.9, 0.2], [0.9, 0.5, 0.8]])
    pts = heatmap_top_points(hm, k=3)
    assert pts == [(1, 0), (0, 1), (2, 1)]  # ties to smaller row-major index
    assert heatmap_top_points(hm, k=99) == [(1, 0), (0, 1), (2, 1), (1, 1), (2, 0), (0, 0)]


def test_manifest_load(tmp_path):
    (tmp_path / "man.json").write_text(
        json.dumps({"a": {"image": "i.png", "mask": "m.png", "category": "Cup", "seen": True}})
    )
    man = load_manifest(tmp_path / "man.json")
    assert man["a"].category == "cup"
    assert man["a"].mask == tmp_path / "m.png"
