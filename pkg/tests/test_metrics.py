import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from depthup import metrics
from depthup.errors import ShapeError, UndefinedMetricError


def rmse_two_loops(pred, gt, mask):
    """Brute-force oracle: explicit double loop, no vectorization."""
    total, n = 0.0, 0
    for i in range(pred.shape[0]):
        for j in range(pred.shape[1]):
            if mask[i, j]:
                total += (float(pred[i, j]) - float(gt[i, j])) ** 2
                n += 1
    return math.sqrt(total / n)


def test_validity_mask_planted_zeros():
    rng = np.random.default_rng(0)
    depth = rng.integers(1, 5000, (20, 30)).astype(np.uint16)
    planted = [(0, 0), (3, 7), (19, 29), (10, 10)]
    for p in planted:
        depth[p] = 0
    m = metrics.validity_mask(depth)
    assert sorted(zip(*np.nonzero(~m))) == sorted(planted)
    assert metrics.validity_mask(np.ones((4, 4))).all()
    assert not metrics.validity_mask(np.zeros((4, 4))).any()


def test_invalid_fraction():
    m = np.ones((10, 10), bool)
    assert metrics.invalid_fraction(m) == 0.0
    m[:5] = False
    assert metrics.invalid_fraction(m) == 0.5


def test_rmse_hand_values():
    assert metrics.masked_rmse(np.array([1.0, 2.0]), np.array([0.0, 2.0]), np.array([True, True])) == pytest.approx(
        math.sqrt(0.5), abs=1e-15)
    assert metrics.masked_rmse(np.array([999.0, 5.0]), np.array([0.0, 5.0]), np.array([False, True])) == 0.0
    x = np.random.default_rng(1).random((5, 5))
    assert metrics.masked_rmse(x, x, np.ones_like(x, bool)) == 0.0


def test_rmse_errors():
    with pytest.raises(UndefinedMetricError):
        metrics.masked_rmse(np.zeros(3), np.zeros(3), np.zeros(3, bool))
    with pytest.raises(ShapeError):
        metrics.masked_rmse(np.zeros(3), np.zeros(4), np.ones(3, bool))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 2 ** 32 - 1))
def test_rmse_matches_two_loop_oracle(h, w, seed):
    rng = np.random.default_rng(seed)
    pred, gt = rng.standard_normal((h, w)), rng.standard_normal((h, w))
    mask = rng.random((h, w)) < 0.7
    mask[rng.integers(h), rng.integers(w)] = True
    got = metrics.masked_rmse(pred, gt, mask)
    want = rmse_two_loops(pred, gt, mask)
    assert abs(got - want) <= 1e-12 * max(1.0, want)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, (6, 7), elements=st.floats(-10, 10)),
       hnp.arrays(np.float64, (6, 7), elements=st.floats(-10, 10)),
       hnp.arrays(np.bool_, (6, 7)))
def test_rmse_properties(pred, gt, mask):
    mask[0, 0] = True
    r = metrics.masked_rmse(pred, gt, mask)
    assert r == pytest.approx(metrics.masked_rmse(gt, pred, mask), abs=1e-12)
    assert 0.0 <= r <= np.abs(pred - gt)[mask].max() + 1e-12
    scrambled = pred.copy()
    scrambled[~mask] = 1e6
    assert metrics.masked_rmse(scrambled, gt, mask) == r


def test_batch_rmse_is_union_of_valid_pixels():
    rng = np.random.default_rng(3)
    pred, gt = rng.random((3, 8, 8)), rng.random((3, 8, 8))
    mask = rng.random((3, 8, 8)) < 0.5
    flat = rmse_two_loops(pred.reshape(24, 8), gt.reshape(24, 8), mask.reshape(24, 8))
    assert metrics.masked_rmse(pred, gt, mask) == pytest.approx(flat, rel=1e-12)


def test_grad_closed_forms():
    g = metrics.masked_rmse_grad(np.array([3.0, 7.0]), np.array([1.0, 0.0]), np.array([True, False]))
    np.testing.assert_array_equal(g, [1.0, 0.0])
    x = np.ones((3, 3))
    np.testing.assert_array_equal(metrics.masked_rmse_grad(x, x, np.ones((3, 3), bool)), 0.0)


def test_grad_finite_difference():
    rng = np.random.default_rng(4)
    pred, gt = rng.random((5, 6)), rng.random((5, 6))
    mask = rng.random((5, 6)) < 0.6
    g = metrics.masked_rmse_grad(pred, gt, mask)
    eps = 1e-6
    for idx in np.ndindex(pred.shape):
        p, m = pred.copy(), pred.copy()
        p[idx] += eps
        m[idx] -= eps
        fd = (metrics.masked_rmse(p, gt, mask) - metrics.masked_rmse(m, gt, mask)) / (2 * eps)
        if mask[idx]:
            assert abs(fd - g[idx]) <= 1e-6 * max(abs(fd), 1e-3)
        else:
            assert g[idx] == 0.0 and fd == 0.0


def test_inpainting_report_counts_and_gap():
    gt = np.full((6, 6), 0.5)
    gt_mask = np.ones((6, 6), bool)
    in_mask = np.ones((6, 6), bool)
    r = metrics.inpainting_report(gt.copy(), in_mask, gt_mask, gt)
    assert r.inpainted_count == 0 and r.mean_abs_neighbor_gap is None
    for p in [(2, 2), (2, 3), (3, 2)]:
        gt_mask[p] = False
        in_mask[p] = False
    pred = gt.copy()
    pred[2, 2] = 0.6
    r = metrics.inpainting_report(pred, in_mask, gt_mask, np.where(gt_mask, gt, 0.0))
    assert r.inpainted_count == 3
    assert r.inpainted_fraction == pytest.approx(3 / 36)
    assert r.mean_abs_neighbor_gap == pytest.approx(0.1 / 3)


def test_evaluate_masks_and_averages():
    class S:
        def __init__(self, gt, mask):
            self.gt, self.gt_mask = gt, mask

    gt = np.array([[0.5, 0.5], [0.2, 0.0]])
    gm = gt != 0
    samples = {"a": [S(gt, gm)], "b": [S(gt, gm), S(gt, gm)]}
    dense = lambda s: (s.gt + 0.1, None)  # noqa: E731
    holes = lambda s: (np.where([[True, False], [True, True]], s.gt, 9.0), np.array([[True, False], [True, True]]))  # noqa: E731
    rep = metrics.evaluate(samples, {"network": dense, "flow": holes})
    assert rep.get("network", "a").rmse == pytest.approx(0.1)
    assert rep.get("flow", "b").rmse == 0.0
    assert rep.get("network", "b").n_frames == 2
    assert rep.average("network") == pytest.approx(np.mean([rep.get("network", n).rmse for n in "ab"]))


def test_report_serialization():
    rep = metrics.EvalReport()
    rep.add(metrics.SequenceResult("naive", "s0", 0.25, 3, 0.7))
    rep.add(metrics.SequenceResult("naive", "s1", 0.75, 3, 0.7))
    rep.notes.append("hello")
    doc = json.loads(rep.to_json())
    assert {"method", "sequence", "rmse", "n_frames", "valid_fraction"} <= set(doc["results"][0])
    assert doc["averages"] == [{"method": "naive", "delta": 1, "rmse": 0.5}]
    text = rep.to_text()
    assert "0.5000" in text and "note: hello" in text
