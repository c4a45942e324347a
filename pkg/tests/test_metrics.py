import json

import pytest

from edgeunlearn import metrics as mt
from edgeunlearn.metrics import EvalRecord, RunEval


def test_rpr_examples():
    assert mt.rpr(3.0, 3.0) == 0.0
    assert mt.rpr(2.5, 0.0) == 100.0
    assert round(mt.rpr(0.19, 0.16), 2) == 15.79
    assert mt.rpr(0.0, 1.0) is None


def test_retain_drop_in_points():
    assert mt.retain_drop(0.95, 0.90) == pytest.approx(5.0)


def test_eval_record_bounds():
    with pytest.raises(ValueError):
        EvalRecord(1.2, 0.0, 0, 100, None)


def test_identical_runs_give_unit_ratio_and_zero_rpr():
    base = RunEval(0.9, 0.95)
    ssd = RunEval(0.85, 0.1, macs=1000, energy_mj=2.0)
    s, o = mt.compare_runs(base, ssd, ssd)
    assert o.mac_ratio == 100.0 and o.rpr == 0.0 and o.energy_ratio == 100.0 and o.energy_saving == 0.0
    assert s.rpr is None and s.delta_retain == pytest.approx(5.0)


def test_compare_runs_fields():
    base = RunEval(0.9, 0.95, config_key="a")
    ssd = RunEval(0.8, 0.0, macs=1000, energy_mj=10.0, config_key="a")
    ours = RunEval(0.85, 0.1, macs=250, energy_mj=1.0, config_key="a")
    s, o = mt.compare_runs(base, ssd, ours)
    assert o.mac_ratio == 25.0 and o.energy_ratio == 10.0 and o.energy_saving == 90.0
    assert o.rpr == pytest.approx(50.0)
    with pytest.raises(ValueError):
        mt.compare_runs(base, ssd, RunEval(0.85, 0.1, macs=250, config_key="b"))
    with pytest.raises(ValueError):
        mt.compare_runs(base, RunEval(0.8, 0.0), ours)


def test_table_has_every_row_and_marks_missing():
    base = RunEval(0.9, 0.95)
    s, o = mt.compare_runs(base, RunEval(0.9, 0.0, macs=10), RunEval(0.9, 0.1, macs=5))
    rows = mt.comparison_rows(base, s, o)
    assert [r["metric"] for r in rows] == ["D_r", "D_f", "dD_r", "MIA", "MACs", "RPR", "ES"]
    text = mt.render_table(rows)
    assert text.splitlines()[0].split("|")[1:] == ["  Baseline ", "       SSD ", "      Ours"]
    rpr_line = [l for l in text.splitlines() if l.startswith("RPR")][0]
    assert rpr_line.split("|")[-1].strip() == "--"  # SSD lost nothing
    doc = json.loads(mt.records_json(base, s, o))
    assert doc["ours"]["mia_acc"] is None and len(doc["table"]) == 7
