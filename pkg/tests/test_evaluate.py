import json
import math

import pytest
from hypothesis import given, settings, strategies as st

from baroloc.atmo import AltitudeEstimate, FloorPlan, floor_index
from baroloc.evaluate import SYNTHETIC_NOTE, UncoveredCheckpointError, evaluate, nearest_estimate
from baroloc.logio import Checkpoint
from baroloc.sim import default_building_trajectory, default_floor_plan

PLAN = default_floor_plan()
TRUTH = [Checkpoint(c.label, 1_000_000 + c.t_ms, c.height) for c in default_building_trajectory().checkpoints]


def _est(t, dh, plan=PLAN):
    idx, label = floor_index(dh, plan)
    return AltitudeEstimate(t, dh, 0.0, dh, idx, label, 0)


def test_identical_estimates():
    rep = evaluate([_est(c.t_ms, c.height) for c in TRUTH], TRUTH, PLAN)
    assert rep.rmse_m == 0.0
    assert rep.floor_accuracy_pct == 100.0
    assert rep.n_checkpoints == 11


def test_constant_bias():
    rep = evaluate([_est(c.t_ms + 100, c.height + 0.2) for c in TRUTH], TRUTH, PLAN)
    assert rep.rmse_m == pytest.approx(0.2, abs=1e-12)
    assert rep.floor_accuracy_pct == 100.0


def test_large_bias_misses_floors():
    rep = evaluate([_est(c.t_ms, c.height + 1.2) for c in TRUTH], TRUTH, PLAN)
    # 1.2 m is past half the 2.3 m spacing everywhere except the top entry
    wrong = [r for r in rep.per_checkpoint if r.floor_truth != r.floor_est]
    assert len(wrong) == 9
    assert rep.floor_accuracy_pct == pytest.approx(100 * 2 / 11)


def test_floor_truth_from_height_not_label():
    plan = FloorPlan((("A", 0.0), ("B", 3.0)))
    truth = [Checkpoint("whatever", 0, 2.9)]
    rep = evaluate([_est(0, 2.9, plan)], truth, plan)
    assert rep.per_checkpoint[0].floor_truth == 1


def test_nearest_in_window_earlier_wins_tie():
    ests = [_est(900, 1.0), _est(1100, 2.0)]
    times = [e.timestamp for e in ests]
    assert nearest_estimate(ests, times, 1000, 500).delta_h == 1.0
    assert nearest_estimate(ests, times, 1090, 500).delta_h == 2.0
    assert nearest_estimate(ests, times, 2000, 500) is None
    assert nearest_estimate(ests, times, 1600, 500).delta_h == 2.0


def test_uncovered_checkpoint_errors_by_default():
    ests = [_est(c.t_ms, c.height) for c in TRUTH[:-1]]
    with pytest.raises(UncoveredCheckpointError, match="CP11"):
        evaluate(ests, TRUTH, PLAN)
    rep = evaluate(ests, TRUTH, PLAN, allow_gaps=True)
    assert rep.uncovered == ["CP11"] and rep.n_checkpoints == 10


def test_no_overlap():
    with pytest.raises(UncoveredCheckpointError):
        evaluate([], TRUTH, PLAN, allow_gaps=True)


def test_report_text_and_json():
    rep = evaluate([_est(c.t_ms, c.height + 0.1) for c in TRUTH], TRUTH, PLAN, config={"ema": 0.2})
    text = rep.to_text()
    assert text.startswith(SYNTHETIC_NOTE)
    assert "RMSE (m): 0.100" in text and "checkpoints: 11" in text
    doc = json.loads(rep.to_json())
    assert doc["config"] == {"window_ms": 500, "ema": 0.2}
    assert len(doc["per_checkpoint"]) == 11


def _recompute(doc):
    rows = doc["per_checkpoint"]
    rmse = math.sqrt(math.fsum((r["estimate_m"] - r["truth_m"]) ** 2 for r in rows) / len(rows))
    acc = 100.0 * sum(r["floor_truth"] == r["floor_est"] for r in rows) / len(rows)
    return rmse, acc


@settings(max_examples=100)
@given(st.lists(st.floats(-1.5, 1.5), min_size=11, max_size=11), st.lists(st.integers(-500, 500), min_size=11,
                                                                            max_size=11))
def test_report_math_rederivable(errors, shifts):
    ests = [_est(c.t_ms + s, c.height + e) for c, e, s in zip(TRUTH, errors, shifts)]
    doc = json.loads(evaluate(ests, TRUTH, PLAN).to_json())
    rmse, acc = _recompute(doc)
    assert abs(rmse - doc["rmse_m"]) <= 1e-12
    assert acc == doc["floor_accuracy_pct"]
