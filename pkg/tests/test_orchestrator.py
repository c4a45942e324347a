import io
import json

import numpy as np
import pytest

from conftest import batch_for, small_cnn, small_mlp
from edgeunlearn import data, fisher, nn_model as nm, orchestrator as orc
from edgeunlearn.dampening import DampeningParams, ProfileParams
from edgeunlearn.nn_model import Layer
from edgeunlearn.orchestrator import ConfigError, MacLedger, UnlearnConfig


@pytest.fixture(scope="module")
def toy():
    ds = data.make_blobs(per_class=100, seed=1)
    m = nm.mlp(16, 5, hidden=(32, 32, 16), seed=1)
    data.train_sgd(m, ds.x_train, ds.y_train, epochs=15, seed=1)
    split = data.unlearn_split(ds, 1, 32)
    gi = fisher.estimate_importance(m, ds.x_train, ds.y_train, source="global", group=32)
    return m, split, gi


def ckpt_bytes(model):
    buf = io.BytesIO()
    nm.write_model(buf, model)
    return buf.getvalue()


def run(toy, **kw):
    m, split, gi = toy
    work = m.copy()
    kw.setdefault("N", 32)
    out = orc.run_unlearning(work, split.forget_x, split.forget_y, gi, UnlearnConfig(**kw))
    return work, out


def test_mac_formula_examples():
    assert orc.count_macs_layer(Layer("dense", (128, 64), [np.zeros((128, 64), np.float32), np.zeros(64, np.float32)]), 1) == 8192
    conv = Layer("conv2d", (8, 16, 3, 1, 12, 12), [np.zeros((16, 8, 3, 3), np.float32), np.zeros(16, np.float32)])
    assert conv.conv_out_hw() == (10, 10)
    assert orc.count_macs_layer(conv, 2) == 230_400
    assert orc.count_macs_layer(Layer("relu"), 5) == 0


def test_ssd_ledger_hand_sum():
    m = nm.mlp(16, 5, hidden=(8, 4))
    led = orc.ssd_ledger(m, 3)
    per = [16 * 8, 8 * 4, 4 * 5]
    assert led.forward_pass == 3 * sum(per)
    assert led.gradient_pass == {3: 2 * 3 * per[0], 2: 2 * 3 * per[1], 1: 2 * 3 * per[2]}
    assert led.total == 3 * 3 * sum(per)
    assert led.ratio_vs_ssd == 100.0


def test_ledger_dict_roundtrip_and_total_check():
    led = MacLedger(10, {1: 4, 2: 6}, 3, 0, 50.0)
    d = led.to_dict()
    assert d["total"] == 23
    assert MacLedger.from_dict(d) == led
    d["total"] = 24
    with pytest.raises(ValueError):
        MacLedger.from_dict(d)


def test_default_checkpoints():
    assert orc.default_checkpoints(16) == (1, 4, 8, 12, 16)
    assert orc.default_checkpoints(5) == (1, 2, 4, 5)
    assert orc.default_checkpoints(1) == (1,)


def test_config_validation(toy):
    m, split, gi = toy
    bad = [dict(mode="nope"), dict(tau=1.5), dict(N=0), dict(checkpoints=(0,)), dict(checkpoints=(m.L + 1,)),
           dict(alpha=0), dict(mode="cau_balanced"), dict(profile=ProfileParams(2, 1, m.L + 1)), dict(fisher_group=0)]
    for kw in bad:
        with pytest.raises((ConfigError, ValueError)):
            UnlearnConfig(**kw).validate(m.L)
    with pytest.raises(ConfigError):
        orc.run_unlearning(m.copy(), split.forget_x[:5], split.forget_y[:5], gi, UnlearnConfig(N=32))


def test_global_importance_shape_checked(toy):
    m, split, _ = toy
    other = nm.mlp(16, 5, hidden=(8,))
    gi = fisher.estimate_importance(other, split.forget_x, split.forget_y)
    with pytest.raises(fisher.ShapeMismatchError):
        orc.run_unlearning(m.copy(), split.forget_x, split.forget_y, gi, UnlearnConfig(N=32))


def test_vacuous_target_stops_at_first_checkpoint(toy):
    m, _, _ = toy
    work, out = run(toy, checkpoints=(2, 3), tau=1.0)
    assert out.stop_layer == 2 and out.early_stopped
    assert [l for l, _ in out.forget_acc_trace] == [2]
    assert sorted(out.ledger.gradient_pass) == [1, 2]
    for l in range(3, m.L + 1):
        assert work.same_params(m, l)


def test_empty_checkpoint_set_equals_ssd(toy):
    m, split, gi = toy
    a, oa = run(toy, checkpoints=())
    b = m.copy()
    ob = orc.run_ssd_baseline(b, split.forget_x, split.forget_y, gi, DampeningParams(10, 1))
    assert ckpt_bytes(a) == ckpt_bytes(b)
    assert oa.stop_layer == ob.stop_layer == m.L and not oa.early_stopped
    assert oa.ledger == ob.ledger and oa.ledger.ratio_vs_ssd == 100.0
    assert oa.report == ob.report
    assert ob.forget_acc_trace == [] and ob.mode == "ssd_full"
    assert ob.ledger.total == orc.ssd_ledger(m, 32).total


def test_ssd_mode_ignores_checkpoints(toy):
    a, oa = run(toy, checkpoints=(1, 2), mode="ssd_full")
    b, ob = run(toy, checkpoints=())
    assert ckpt_bytes(a) == ckpt_bytes(b) and oa.ledger == ob.ledger


def test_balanced_with_unit_bound_equals_uniform(toy):
    m, _, _ = toy
    cps = tuple(m.indices())
    a, oa = run(toy, checkpoints=cps)
    b, ob = run(toy, checkpoints=cps, mode="cau_balanced", profile=ProfileParams(1.0, 2.0, m.L))
    assert ckpt_bytes(a) == ckpt_bytes(b)
    assert oa.stop_layer == ob.stop_layer and oa.forget_acc_trace == ob.forget_acc_trace


def test_profile_ignored_outside_balanced_mode(toy):
    m, _, _ = toy
    a, _ = run(toy, checkpoints=(1,), profile=ProfileParams(10.0, 2.0, m.L))
    b, _ = run(toy, checkpoints=(1,))
    assert ckpt_bytes(a) == ckpt_bytes(b)


def test_untouched_suffix_and_checkpoint_consistency(toy):
    m, split, _ = toy
    for tau in (1.0, 0.6, 0.2):
        work, out = run(toy, checkpoints=tuple(m.indices()), tau=tau)
        for l in range(out.stop_layer + 1, m.L + 1):
            assert work.same_params(m, l)
        last_l, last_acc = out.forget_acc_trace[-1]
        assert last_l == out.stop_layer
        assert last_acc == nm.evaluate_accuracy(work, split.forget_x, split.forget_y)


def test_ledger_decomposition(toy):
    m, _, _ = toy
    work, out = run(toy, checkpoints=(1, 2, 3), tau=1.0)
    led = out.ledger
    assert led.forward_pass == orc.forward_macs(m, 32)
    assert led.gradient_pass == {1: 2 * 32 * m.layer(1).forward_macs()}
    assert led.checkpoint_partial_inference == orc.partial_macs(m, 1, 32)
    assert led.ratio_vs_ssd == pytest.approx(100 * led.total / orc.ssd_ledger(m, 32).total)


def test_ledger_monotone(toy):
    m, _, _ = toy
    ssd = orc.ssd_ledger(m, 32)
    for cps, tau in [((1, 2, 3, 4), 0.2), ((2, 4), 0.5), ((1,), 1.0), ((), 0.2)]:
        _, out = run(toy, checkpoints=cps, tau=tau)
        led = out.ledger
        assert led.total <= ssd.total + led.checkpoint_partial_inference
        skipped = sum(v for l, v in ssd.gradient_pass.items() if l not in led.gradient_pass)
        if out.early_stopped and skipped > led.checkpoint_partial_inference:
            assert led.total < ssd.total


def test_outcome_json_roundtrip(toy):
    m, _, _ = toy
    _, out = run(toy, checkpoints=(1, 3), tau=0.2, mode="cau_balanced", profile=ProfileParams(2.0, 2.0, m.L))
    text = out.to_json()
    doc = json.loads(text)
    assert json.dumps(doc, sort_keys=True, indent=2) + "\n" == text
    assert MacLedger.from_dict(doc["ledger"]) == out.ledger
    assert doc["config"]["profile"] == {"b_r": 2.0, "c_m": 2.0}
    assert doc["config"]["fisher_group"] == 32
    assert [r["l"] for r in doc["layers"]] == list(m.indices())


def test_balanced_profile_midpoint(toy):
    m, split, gi = toy
    counts = orc.ssd_selection_counts(m, split.forget_x, split.forget_y, gi, 10.0)
    p = orc.balanced_profile(m, split.forget_x, split.forget_y, gi, 10.0, b_r=3.0)
    assert p.L == m.L and p.b_r == 3.0 and 1 <= p.c_m <= m.L
    from edgeunlearn.dampening import default_midpoint
    assert p.c_m == default_midpoint(counts)
    assert orc.balanced_profile(m, split.forget_x, split.forget_y, gi, 10.0, c_m=1.5).c_m == 1.5


def test_selection_counts_match_ssd_report(toy):
    m, split, gi = toy
    counts = orc.ssd_selection_counts(m, split.forget_x, split.forget_y, gi, 10.0)
    _, out = run(toy, checkpoints=())
    assert counts == out.report.selected_counts()


def test_cnn_run_streams_all_layers():
    m = small_cnn(5)
    x, y = batch_for(m, 6)
    gi = fisher.estimate_importance(m, *batch_for(m, 20, seed=2), source="global", group=6)
    work = m.copy()
    out = orc.run_unlearning(work, x, y, gi, UnlearnConfig(N=6, checkpoints=(1, 4), tau=0.0))
    assert out.stop_layer == 4 and not out.early_stopped
    assert [r.l for r in out.report.layers] == [1, 2, 3, 4]
