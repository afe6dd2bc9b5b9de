import itertools

import numpy as np
import pytest

from hdnet.geometry import CameraIntrinsics, back_project, project
from hdnet.metrics import (ImageEval, RootPrediction, ap_ar_from_scored, evaluate, match_roots,
                           mrpe, pck, read_predictions, root_ap_ar, select_columns,
                           write_metrics_csv, write_predictions)


def _preds(points, scores=None):
    scores = scores if scores is not None else [1.0] * len(points)
    return [RootPrediction(p, s) for p, s in zip(points, scores)]


# ---------------------------------------------------------------- matching


def test_match_exact_and_exclusive():
    m = match_roots(_preds([[0, 0, 1000]]), [[0, 0, 1000]])
    assert m.pairs == [(0, 0, 0.0)]
    m = match_roots(_preds([[0, 0, 1300], [0, 0, 1100]]), [[0, 0, 1000]])
    assert m.pairs == [(1, 0, 100.0)] and m.unmatched_preds == [0] and m.unmatched_gts == []


def test_match_tie_break_by_index():
    m = match_roots(_preds([[10, 0, 0], [-10, 0, 0]]), [[0, 0, 0]])
    assert m.pairs[0][:2] == (0, 0)


def test_match_empty_sides():
    m = match_roots([], [[0, 0, 1]])
    assert m.pairs == [] and m.unmatched_gts == [0]
    with pytest.raises(ValueError):
        match_roots(_preds([[0, 0, 1]]), [[0, 0, 1]], mode="hungarian")


def _all_matchings(n_p, n_g):
    k = min(n_p, n_g)
    for ps in itertools.permutations(range(n_p), k):
        for gs in itertools.combinations(range(n_g), k):
            yield list(zip(ps, gs))


def test_greedy_matches_brute_force_lexicographic_oracle():
    # with distinct distances, nearest-first greedy is the full-size matching
    # whose ascending distance list is lexicographically smallest
    rng = np.random.default_rng(0)
    for _ in range(60):
        n_p, n_g = (int(x) for x in rng.integers(1, 7, size=2))
        p = rng.uniform(-1000, 1000, size=(n_p, 3))
        g = rng.uniform(-1000, 1000, size=(n_g, 3))
        d = np.linalg.norm(p[:, None] - g[None], axis=-1)
        best = min(_all_matchings(n_p, n_g), key=lambda m: sorted(d[i, j] for i, j in m))
        got = match_roots(_preds(p), g)
        assert sorted((i, j) for i, j, _ in got.pairs) == sorted(best)
        assert len(got.pairs) == min(n_p, n_g)


def test_optimal_mode_minimizes_total_distance():
    rng = np.random.default_rng(1)
    for _ in range(30):
        n_p, n_g = (int(x) for x in rng.integers(1, 6, size=2))
        p = rng.uniform(-1000, 1000, size=(n_p, 3))
        g = rng.uniform(-1000, 1000, size=(n_g, 3))
        d = np.linalg.norm(p[:, None] - g[None], axis=-1)
        best = min(sum(d[i, j] for i, j in m) for m in _all_matchings(n_p, n_g))
        got = match_roots(_preds(p), g, mode="optimal")
        assert sum(x for _, _, x in got.pairs) == pytest.approx(best, rel=1e-12)
        greedy = match_roots(_preds(p), g)
        assert sum(x for _, _, x in greedy.pairs) >= best - 1e-9


def test_matching_symmetric_under_relabeling():
    rng = np.random.default_rng(2)
    p = rng.uniform(-500, 500, size=(5, 3))
    g = rng.uniform(-500, 500, size=(4, 3))
    pp, pg = rng.permutation(5), rng.permutation(4)
    a = {(i, j) for i, j, _ in match_roots(_preds(p), g).pairs}
    b = {(pp[i], pg[j]) for i, j, _ in match_roots(_preds(p[pp]), g[pg]).pairs}
    assert a == b
    swapped = {(j, i) for i, j, _ in match_roots(_preds(g), p).pairs}
    assert swapped == a


# ---------------------------------------------------------------- MRPE


def test_mrpe_examples():
    assert mrpe([[1, 2, 3]], [[1, 2, 3]]) == {"mrpe": 0, "mrpe_x": 0, "mrpe_y": 0, "mrpe_z": 0}
    r = mrpe([[3, 4, 0]], [[0, 0, 0]])
    assert (r["mrpe"], r["mrpe_x"], r["mrpe_y"], r["mrpe_z"]) == (5, 3, 4, 0)
    assert mrpe([[2, 0, 0], [0, 0, 4]], [[0, 0, 0], [0, 0, 0]])["mrpe"] == 3
    with pytest.raises(ValueError):
        mrpe([], [])


def test_mrpe_z_equals_depth_error_for_perfect_pixels():
    rng = np.random.default_rng(3)
    cam = CameraIntrinsics(100, 100, 64, 64)
    gt = np.column_stack([rng.uniform(-800, 800, 20), rng.uniform(-500, 500, 20), rng.uniform(3500, 11000, 20)])
    z = gt[:, 2] * rng.uniform(0.9, 1.1, 20)
    pred = np.array([back_project(*project(g, cam), zi, cam) for g, zi in zip(gt, z)])
    assert mrpe(pred, gt)["mrpe_z"] == pytest.approx(np.abs(z - gt[:, 2]).mean(), rel=1e-12)


# ---------------------------------------------------------------- AP / AR


def test_ap_ar_single_examples():
    hit = root_ap_ar([ImageEval(_preds([[0, 0, 5000]]), np.array([[0, 0, 5000]]))], [250])
    assert hit[250.0] == {"AP": 1.0, "AR": 1.0}
    miss = root_ap_ar([ImageEval(_preds([[0, 0, 5300]]), np.array([[0, 0, 5000]]))], [250])
    assert miss[250.0] == {"AP": 0.0, "AR": 0.0}


def _oracle_ap_ar(scored, num_gt, thr):
    """Score-threshold sweep written directly from the definition."""
    scores = np.array([s for s, _ in scored])
    tp_flags = np.array([d < thr for _, d in scored])
    prec, rec = [], []
    for t in sorted(set(scores), reverse=True):
        keep = scores >= t
        prec.append(tp_flags[keep].sum() / keep.sum())
        rec.append(tp_flags[keep].sum() / num_gt)
    prec, rec = np.array(prec), np.array(rec)
    ap = np.mean([prec[rec >= r - 1e-12].max() if np.any(rec >= r - 1e-12) else 0.0
                  for r in np.linspace(0, 1, 101)])
    return ap, tp_flags.sum() / num_gt


def test_ap_matches_sweep_oracle():
    rng = np.random.default_rng(4)
    for trial in range(200):
        n = int(rng.integers(1, 8))
        num_gt = int(rng.integers(1, 7))
        scores = rng.choice([0.2, 0.5, 0.9], size=n) if trial % 2 else rng.uniform(size=n)
        dist = np.where(rng.uniform(size=n) < 0.2, np.inf, rng.uniform(0, 400, size=n))
        scored = list(zip(scores.tolist(), dist.tolist()))
        ap, ar = ap_ar_from_scored(scored, num_gt, 250.0)
        oap, oar = _oracle_ap_ar(scored, num_gt, 250.0)
        assert ap == pytest.approx(oap, abs=1e-12)
        assert ar == pytest.approx(oar, abs=1e-12)


def test_ap_mixed_five_instances():
    gts = np.array([[0, 0, 4000], [500, 0, 6000], [-600, 100, 8000]])
    preds = _preds([[0, 0, 4100], [500, 0, 6400], [-600, 100, 8150], [2000, 0, 9000], [40, 0, 4000]],
                   [0.9, 0.8, 0.6, 0.7, 0.3])
    res = root_ap_ar([ImageEval(preds, gts)], [250])[250.0]
    # matching ignores scores, so the 40 mm p4 takes g0 from the 100 mm p0;
    # ranked: F(0.9) F(0.8, 400 mm) F(0.7) T(0.6) T(0.3), precision 1/4 then 2/5
    expected = 67 * 0.4 / 101
    assert res["AP"] == pytest.approx(expected, abs=1e-12)
    assert res["AR"] == pytest.approx(2 / 3)


def test_ap_ar_monotone_in_threshold():
    rng = np.random.default_rng(5)
    images = []
    for _ in range(10):
        g = rng.uniform(-1000, 1000, size=(3, 3)) + [0, 0, 6000]
        p = g[:2] + rng.normal(0, 150, size=(2, 3))
        images.append(ImageEval(_preds(p, rng.uniform(size=2)), g))
    res = root_ap_ar(images, [50, 100, 150, 200, 250, 400])
    for a, b in zip([50, 100, 150, 200, 250], [100, 150, 200, 250, 400]):
        assert res[float(a)]["AP"] <= res[float(b)]["AP"]
        assert res[float(a)]["AR"] <= res[float(b)]["AR"]


def test_ap_no_ground_truth_is_nan():
    ap, ar = ap_ar_from_scored([(0.5, np.inf)], 0, 250)
    assert np.isnan(ap) and np.isnan(ar)


# ---------------------------------------------------------------- PCK


def test_pck_examples():
    rng = np.random.default_rng(6)
    gt = rng.uniform(-500, 500, size=(2, 16, 3))
    assert pck(gt, gt, "absolute") == 100.0
    assert pck(gt, gt, "root-aligned") == 100.0
    shifted = gt + np.array([200.0, 0, 0])
    assert pck(shifted, gt, "absolute") == 0.0
    assert pck(shifted, gt, "root-aligned") == 100.0
    one = gt.copy()
    one[0, 5, 1] += 149.0
    assert pck(one, gt, "absolute") == 100.0
    one[0, 5, 1] += 1.0
    assert pck(one, gt, "absolute") == pytest.approx(100 * 31 / 32)
    with pytest.raises(ValueError):
        pck(np.zeros((0, 16, 3)), np.zeros((0, 16, 3)))


def test_pck_rel_translation_invariant():
    rng = np.random.default_rng(7)
    gt = rng.uniform(-500, 500, size=(3, 16, 3))
    pred = gt + rng.normal(0, 80, size=gt.shape)
    base = pck(pred, gt, "root-aligned")
    for _ in range(5):
        t = rng.uniform(-2000, 2000, size=3)
        assert pck(pred + t, gt, "root-aligned") == base


# ---------------------------------------------------------------- files and suite


def test_predictions_roundtrip(tmp_path):
    preds = {0: [RootPrediction([1.5, 2, 3000], 0.7, np.ones((2, 3)))], 4: [RootPrediction([0, 0, 1], 1.0)]}
    write_predictions(tmp_path / "p.jsonl", preds)
    back = read_predictions(tmp_path / "p.jsonl")
    assert sorted(back) == [0, 4]
    np.testing.assert_array_equal(back[0][0].root3d, preds[0][0].root3d)
    np.testing.assert_array_equal(back[0][0].pose3d, np.ones((2, 3)))
    assert back[0][0].score == 0.7 and back[4][0].pose3d is None
    (tmp_path / "bad.jsonl").write_text('{"image_id": 1, "root3d": [1, 2]}\n')
    with pytest.raises(ValueError, match="bad.jsonl:1"):
        read_predictions(tmp_path / "bad.jsonl")


def test_root_prediction_rejects_nonfinite():
    with pytest.raises(ValueError):
        RootPrediction([0, np.nan, 1])


def test_evaluate_oracle_predictions(tmp_path):
    rng = np.random.default_rng(8)
    gts, poses, seqs, preds = {}, {}, {}, {}
    for i in range(6):
        g = rng.uniform(-800, 800, size=(2, 16, 3)) + [0, 0, 6000]
        poses[i], gts[i], seqs[i] = g, g[:, 0], f"S{i % 2 + 1}"
        preds[i] = [RootPrediction(p[0], 1.0, p) for p in g]
    rows = evaluate(preds, gts, poses, seqs)
    assert list(rows) == ["all", "S1", "S2"]
    for row in rows.values():
        assert row["mrpe"] == 0 and row["depth_median_rel"] == 0
        assert row["ap_250"] == 1 and row["ar_100"] == 1
        assert row["pck_abs"] == 100 and row["pck_rel"] == 100
    sub = select_columns(rows["all"], ["mrpe", "ap"])
    assert set(sub) == {"mrpe", "mrpe_x", "mrpe_y", "mrpe_z", "ap_250", "ap_200", "ap_150", "ap_100"}
    with pytest.raises(ValueError):
        select_columns(rows["all"], ["bogus"])
    write_metrics_csv(tmp_path / "m.csv", [{"sequence": k, **v} for k, v in rows.items()])
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0].startswith("sequence,depth_median_rel") and len(lines) == 4


def test_evaluate_missing_predictions_count_as_misses():
    gts = {0: np.array([[0, 0, 5000.0]]), 1: np.array([[0, 0, 7000.0]])}
    rows = evaluate({0: [RootPrediction([0, 0, 5000.0])]}, gts)
    assert rows["all"]["ar_250"] == 0.5
    assert rows["all"]["mrpe"] == 0
    assert np.isnan(rows["all"]["pck_abs"])
