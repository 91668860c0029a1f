import numpy as np
import pytest

import oracles
from visual_sentences import metrics as M
from visual_sentences.worlds import SEG_PALETTE


def rng(i):
    return np.random.default_rng([i, 0x3E7])


def random_edges(r, size=8):
    gt = (r.random((size, size)) < r.uniform(0.05, 0.4)).astype(float)
    noise = r.random((size, size))
    pred = np.clip(0.6 * gt + 0.5 * noise * r.random(), 0, 1)
    return pred, gt


def test_rmse_cases():
    a = np.random.default_rng(0).random((2, 4, 4, 3))
    assert M.rmse(a, a) == 0.0
    assert M.rmse(np.full((4, 4), 10 / 255), np.zeros((4, 4))) == pytest.approx(10.0)
    board = np.indices((4, 4)).sum(axis=0) % 2
    assert M.rmse(board, 1 - board) == 255.0
    with pytest.raises(ValueError):
        M.rmse(np.zeros(3), np.zeros(4))


def test_rmse_matches_oracle():
    for i in range(100):
        r = rng(i)
        p, g = r.random((1, 3, 5, 3)), r.random((1, 3, 5, 3))
        assert abs(M.rmse(p, g) - oracles.rmse(p, g)) < 1e-9


def test_edge_perfect_and_disjoint():
    gt = np.zeros((8, 8))
    gt[2:6, 3] = 1
    assert M.edge_metrics(gt, gt) == (1.0, 1.0, 1.0)
    # the complement touches every edge pixel within radius 1, so only a far layout scores 0
    far = np.zeros((8, 8))
    far[0, 0] = far[7, 7] = 1
    opposite = np.zeros((8, 8))
    opposite[3:5, 3:5] = 1
    for matched, n_pred, n_gt in M.edge_counts(opposite, far):
        assert matched == 0


def test_edge_matching_is_one_to_one():
    gt = np.zeros((5, 5))
    gt[2, 2] = 1
    pred = np.zeros((5, 5))
    pred[2, 1:4] = 1  # three predictions around one true pixel
    matched, n_pred, n_gt = M.edge_counts(pred, gt)[0]
    assert (matched, n_pred, n_gt) == (1, 3, 1)


def test_edge_empty_conventions():
    empty = np.zeros((4, 4))
    ods, ois, ap = M.edge_metrics(empty, empty)
    assert ods == ois == 1.0


def test_edge_rejects_soft_ground_truth():
    with pytest.raises(ValueError):
        M.edge_metrics(np.zeros((4, 4)), np.full((4, 4), 0.5))


def test_edge_matches_brute_force():
    for i in range(100):
        r = rng(i)
        size = 6 if i % 2 else 8
        n = 1 + i % 3
        pairs = [random_edges(r, size) for _ in range(n)]
        preds, gts = [p for p, _ in pairs], [g for _, g in pairs]
        got = M.edge_metrics(preds, gts)
        want = oracles.edge_metrics(preds, gts)
        np.testing.assert_allclose(got, want, atol=1e-6)
        assert got[0] <= got[1] + 1e-12


def test_segmentation_hand_case():
    miou, pacc = M.segmentation_metrics_from_labels([0, 0, 1, 1], [0, 1, 1, 1])
    assert pacc == 0.75
    assert miou == pytest.approx(7 / 12, abs=1e-12)
    assert M.segmentation_metrics_from_labels([0, 0, 1, 1], [0, 0, 0, 0])[1] == 0.5


def test_segmentation_matches_oracle():
    for i in range(100):
        r = rng(i)
        gt_lab = r.integers(0, 4, (4, 4))
        pred_lab = np.where(r.random((4, 4)) < 0.7, gt_lab, r.integers(0, 4, (4, 4)))
        pred_col = np.clip(SEG_PALETTE[pred_lab] + r.normal(0, 0.08, (4, 4, 3)), 0, 1)
        gt_col = SEG_PALETTE[gt_lab]
        got = M.segmentation_metrics(pred_col, gt_col, SEG_PALETTE)
        want = oracles.segmentation(
            np.array(oracles.nearest_labels(pred_col, SEG_PALETTE)),
            np.array(oracles.nearest_labels(gt_col, SEG_PALETTE)))
        np.testing.assert_allclose(got, want, atol=1e-9)


def test_depth_hand_cases():
    gt = np.linspace(0.1, 0.7, 16).reshape(4, 4)
    same = M.depth_metrics(gt, gt)
    assert same["delta1"] == 1.0 and same["abs_rel"] == 0.0 and same["silog"] == 0.0
    d = M.depth_metrics(1.3 * gt, gt)
    assert d["delta1"] == 0.0 and d["delta2"] == 1.0
    assert d["abs_rel"] == pytest.approx(0.3, abs=1e-12)
    assert d["silog"] == pytest.approx(0.0, abs=1e-9)


def test_depth_matches_oracle():
    for i in range(100):
        r = rng(i)
        gt = r.uniform(0.0, 1.0, (4, 4))
        pred = np.clip(gt * r.uniform(0.5, 1.5, (4, 4)), 0, 1.2)
        got, want = M.depth_metrics(pred, gt), oracles.depth(pred, gt)
        for k in want:
            assert abs(got[k] - want[k]) < 1e-9, k
        assert got["delta1"] <= got["delta2"] <= got["delta3"]


def _rotation(axis, degrees):
    axis = np.asarray(axis, float) / np.linalg.norm(axis)
    a = np.radians(degrees)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(a) * k + (1 - np.cos(a)) * k @ k


def test_normals_hand_cases():
    r = np.random.default_rng(0)
    axis = np.array([0.2, -0.5, 0.8])
    # vectors perpendicular to the axis rotate by exactly the full angle
    v = np.cross(r.normal(size=(20, 3)), axis)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    rotated = v @ _rotation(axis, 10.0).T
    out = M.normal_metrics(rotated, v)
    assert out["mean"] == pytest.approx(10.0, abs=1e-6)
    assert out["median"] == pytest.approx(10.0, abs=1e-6)
    assert out["within_5"] == 0.0 and out["within_11_25"] == 1.0
    flipped = M.normal_metrics(-v, v)
    assert flipped["mean"] == pytest.approx(180.0) and flipped["within_30"] == 0.0


def test_normals_exclude_zero_vectors():
    v = np.array([[0, 0, 1.0], [0, 0, 0], [1.0, 0, 0]])
    out = M.normal_metrics(v, v)
    assert out["excluded"] == 1 and out["mean"] == 0.0
    with pytest.raises(ValueError):
        M.normal_metrics(np.zeros((2, 3)), np.zeros((2, 3)))


def test_normals_match_oracle():
    for i in range(100):
        r = rng(i)
        p, g = r.normal(size=(4, 4, 3)), r.normal(size=(4, 4, 3))
        p[0, 0] = 0
        got, want = M.normal_metrics(p, g), oracles.normals(p, g)
        for k in want:
            assert abs(got[k] - want[k]) < 1e-9, k


def test_style_proxy_cases():
    r = np.random.default_rng(1)
    x = r.random((1, 8, 8, 3))
    assert M.style_proxy(x, x) == 0.0
    shuffled = x.reshape(-1, 3)[r.permutation(64)].reshape(x.shape)
    assert M.style_proxy(shuffled, x) == 0.0
    assert M.style_proxy(np.zeros((4, 4, 3)), np.ones((4, 4, 3))) == 1.0
    for i in range(100):
        q = rng(i)
        a, b = q.random((1, 4, 4, 3)), q.random((1, 4, 4, 3)) ** 2
        assert abs(M.style_proxy(a, b) - oracles.style_tv(a, b)) < 1e-9


def test_report_validation_and_round_trip():
    rep = M.MetricReport("depth_map", "II", 4, {"delta1": 0.5, "abs_rel": 0.1})
    assert M.MetricReport.from_dict(rep.to_dict()).to_json() == rep.to_json()
    with pytest.raises(ValueError):
        M.MetricReport("x", "II", 4, {"ods": 1.5})
    with pytest.raises(ValueError):
        M.MetricReport("x", "II", 4, {"rmse": float("nan")})
    table = M.format_table([rep])
    assert "delta1" in table.splitlines()[0]
