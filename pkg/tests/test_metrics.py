import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cogrind import metrics as mt


def box(x, y, w, h):
    return np.array([x, y, x + w, y + h], dtype=float)


def test_iou_examples():
    assert mt.iou([0, 0, 2, 2], [0, 0, 2, 2]) == 1.0
    assert mt.iou([0, 0, 2, 2], [1, 1, 3, 3]) == pytest.approx(1 / 7, abs=1e-15)
    assert mt.iou([0, 0, 1, 1], [2, 2, 3, 3]) == 0.0
    with pytest.raises(ValueError, match="degenerate"):
        mt.iou([0, 0, 0, 1], [0, 0, 1, 1])


boxes = st.builds(box, st.floats(-50, 50), st.floats(-50, 50), st.floats(0.5, 40), st.floats(0.5, 40))


@settings(max_examples=200, deadline=None)
@given(boxes, boxes)
def test_iou_laws(a, b):
    v = mt.iou(a, b)
    assert 0.0 <= v <= 1.0
    assert v == pytest.approx(mt.iou(b, a), abs=1e-15)
    assert mt.iou(a, a) == pytest.approx(1.0)


def test_evaluate_examples():
    gt = np.array([box(0, 0, 10, 10)] * 2)
    # IoU 0.51 and 0.49 through widened predictions of the same height
    preds = np.array([box(0, 0, 10 / 0.51, 10), box(0, 0, 10 / 0.49, 10)])
    rep = mt.evaluate(preds, gt)
    assert rep.acc_at_05 == 0.5
    assert rep.miou == pytest.approx(0.5)
    exact = mt.evaluate(gt, gt)
    assert exact.acc_at_05 == 1.0 and exact.precision_20 == 1.0
    assert exact.success_auc == pytest.approx(1.0, abs=0.01)
    with pytest.raises(ValueError, match="ground-truth"):
        mt.evaluate(gt, gt[:1])


def test_strict_boundary():
    rep = mt.evaluate([box(0, 0, 20, 10)], [box(0, 0, 10, 10)])
    assert mt.iou(box(0, 0, 20, 10), box(0, 0, 10, 10)) == 0.5
    assert rep.acc_at_05 == 0.0
    s = np.array(rep.success)
    assert s[49] == 1.0 and s[50] == 0.0


def test_acc_equals_success_at_half_and_curves_monotone():
    rng = np.random.default_rng(0)
    gt = np.array([box(*rng.uniform(0, 30, 2), *rng.uniform(5, 20, 2)) for _ in range(300)])
    pred = gt + rng.normal(scale=3, size=gt.shape)
    pred[:, 2:] = np.maximum(pred[:, 2:], pred[:, :2] + 1)
    rep = mt.evaluate(pred, gt, [f"v{i % 7}" for i in range(300)])
    assert rep.acc_at_05 == rep.success[50]
    assert np.all(np.diff(rep.success) <= 0) and np.all(np.diff(rep.precision) >= 0)
    for v in (rep.acc_at_05, rep.miou, rep.success_auc, rep.precision_20):
        assert 0 <= v <= 1
    assert len(rep.per_video) == 7
    shifted = mt.evaluate(pred + 17.0, gt + 17.0)
    for k, v in rep.summary().items():
        assert shifted.summary()[k] == pytest.approx(v, abs=1e-12)


def test_precision_uses_centers():
    rep = mt.evaluate([box(20, 0, 10, 10)], [box(0, 0, 10, 10)])
    assert rep.precision_20 == 1.0
    rep = mt.evaluate([box(20.5, 0, 10, 10)], [box(0, 0, 10, 10)])
    assert rep.precision_20 == 0.0


def test_report_outputs(tmp_path):
    rep = mt.evaluate([box(0, 0, 10, 10)], [box(1, 1, 10, 10)], ["a"])
    rep.to_json(tmp_path / "r.json")
    rep.write_curves(tmp_path / "c.csv")
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == "kind,threshold,value" and len(lines) == 1 + 101 + 51
    table = mt.format_table({"Baseline": rep, "SL-Att": rep})
    assert table.splitlines()[2].startswith("SL-Att")
