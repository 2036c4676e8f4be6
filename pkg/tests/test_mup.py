import math
from dataclasses import replace

import numpy as np
import pytest

from hybridssm.mup import (FORWARD_KEYS, REF_SHAPES, MuPMultiplierSet, SweepRecord, apply_records, apply_symmetry,
                           coordinate_value, fit_sensitivity, init_std, scale_multipliers, select_step, tune,
                           tune_stage, tuning_schedule, width_factor)


def test_width_scaling_examples():
    base = MuPMultiplierSet.table13()
    twice = scale_multipliers(base, d_ref=1280, d=2560)
    assert twice.forward["m_unemb"] == base.forward["m_unemb"] / 2
    assert twice.forward["m_emb"] == base.forward["m_emb"]
    same = scale_multipliers(base, d_ref=1280, d=1280)
    assert same.forward == base.forward
    four = scale_multipliers(base, d_ref=1280, d=5120)
    assert math.isclose(four.forward["m_key"], base.forward["m_key"] / 16, rel_tol=1e-15)
    with pytest.raises(KeyError):
        width_factor("m_bogus", REF_SHAPES, REF_SHAPES)
    with pytest.raises(ValueError):
        scale_multipliers(base, d_ref=640, d=1280)


def test_transfers_compose():
    base = MuPMultiplierSet.table13()
    a = scale_multipliers(scale_multipliers(base, d_ref=1280, d=640), d_ref=640, d=2560)
    b = scale_multipliers(base, d_ref=1280, d=2560)
    assert a.forward == b.forward


def test_tunable_count_and_validation():
    m = MuPMultiplierSet.table13()
    assert len(m.tunables()) == 35 and len(set(m.tunables())) == 35
    with pytest.raises(ValueError):
        MuPMultiplierSet({**m.tuned, "m_x": 0.0}, m.matrix_lr, m.matrix_wd, m.vector_lr)
    with pytest.raises(ValueError):
        MuPMultiplierSet({k: v for k, v in m.tuned.items() if k != "m_x"}, m.matrix_lr, m.matrix_wd, m.vector_lr)
    assert MuPMultiplierSet.from_dict(m.to_dict()) == m


def test_init_std_keeps_preactivation_scale():
    rng = np.random.default_rng(0)
    for fan_in, mult in ((64, 0.25), (1024, 4.0)):
        W = rng.standard_normal((2000, fan_in)) * init_std(mult, fan_in)
        x = rng.standard_normal(fan_in)
        y = mult * W @ x / np.sqrt(np.mean(x ** 2))
        assert abs(np.std(y) - 1.0) < 0.05


def test_symmetry_identity_and_linear_layer():
    m = MuPMultiplierSet.ones()
    rng = np.random.default_rng(0)
    W, x = rng.standard_normal((3, 5)), rng.standard_normal(5)
    params, hypers, attached = {"W": W}, {"W": (1.0, 0.5)}, {"m_x": ["W"]}
    p1, m1, h1 = apply_symmetry(params, m, hypers, attached, 1.0)
    assert np.array_equal(p1["W"], W) and m1.tuned == m.tuned and h1 == hypers
    p2, m2, h2 = apply_symmetry(params, m, hypers, attached, 8.0)
    assert np.allclose(m2.forward["m_x"] * p2["W"] @ x, m.forward["m_x"] * W @ x, rtol=1e-15)
    assert h2["W"] == (8.0, 0.0625)
    with pytest.raises(ValueError):
        apply_symmetry(params, m, hypers, attached, 0.0)


def test_fit_sensitivity_examples():
    assert fit_sensitivity(1.1, 1.0, 1.1, 2.0) == pytest.approx((0.2, 0.0), abs=1e-12)
    assert fit_sensitivity(1.0, 1.0, 1.0, 2.0) == (0.0, 0.0)
    a, off = fit_sensitivity(1.3, 1.0, 0.9, 2.0)
    assert a == pytest.approx(0.2) and off > 0
    with pytest.raises(ValueError):
        fit_sensitivity(math.nan, 1.0, 1.0, 2.0)
    with pytest.raises(ValueError):
        fit_sensitivity(1.0, 1.0, 1.0, 1.0)


def test_select_step_keeps_center_on_ties():
    assert select_step(1.0, 1.0, 1.0) == 0
    assert select_step(0.99995, 1.0, 1.2) == 0
    assert select_step(0.9, 1.0, 1.2) == -1
    assert select_step(1.2, 1.0, 0.8) == 1


def test_flat_oracle_moves_nothing():
    m = MuPMultiplierSet.table13()
    out, recs = tune_stage(m, 2.0, lambda mm: 3.0)
    assert out == m and all(r.step == 0 for r in recs) and len(recs) == 35


def test_one_multiplier_oracle():
    m = MuPMultiplierSet.table13()
    target = m.forward["m_x"] * 4
    oracle = lambda mm: (math.log2(mm.forward["m_x"]) - math.log2(target)) ** 2
    out, recs = tune_stage(m, 2.0, oracle)
    moved = [(r.kind, r.multiplier) for r in recs if r.step]
    assert moved == [("forward", "m_x")]
    assert out.forward["m_x"] == 2 * m.forward["m_x"]
    assert {k: v for k, v in out.tuned.items() if k != "m_x"} == {k: v for k, v in m.tuned.items() if k != "m_x"}
    final, _ = tune(m, oracle, [2.0, 2.0, 2.0])
    assert final.forward["m_x"] == target


def test_tuner_is_deterministic():
    rng = np.random.default_rng(0)
    w = {k: rng.random() for k in FORWARD_KEYS}
    oracle = lambda mm: sum(w[k] * math.log(mm.forward[k]) ** 2 for k in FORWARD_KEYS)
    coords = [("forward", k) for k in FORWARD_KEYS]
    m0 = MuPMultiplierSet.table13()
    a = tune(m0, oracle, tuning_schedule(4), coords)
    b = tune(m0, oracle, tuning_schedule(4), coords)
    assert a[0] == b[0]
    assert [[r.to_json() for r in s] for s in a[1]] == [[r.to_json() for r in s] for s in b[1]]


def test_elr_and_ewd_sweep_directions():
    m = MuPMultiplierSet.table13()
    seen = []

    def oracle(mm):
        seen.append((mm.matrix_lr["W_up"], mm.matrix_wd["W_up"]))
        return 1.0
    tune_stage(m, 2.0, oracle, [("elr", "W_up"), ("ewd", "W_up")])
    lr, wd = m.matrix_lr["W_up"], m.matrix_wd["W_up"]
    # baseline, ELR down/up, EWD down/up
    assert seen[1:3] == [(lr / 2, wd / 2), (lr * 2, wd * 2)]
    assert seen[3:5] == [(lr / 2, wd * 2), (lr * 2, wd / 2)]
    assert coordinate_value(m, "elr", "W_up") == pytest.approx(math.sqrt(lr * wd))


def test_failed_oracle_is_recorded():
    m = MuPMultiplierSet.table13()

    def oracle(mm):
        if mm.forward["m_B"] > m.forward["m_B"]:
            raise FloatingPointError("diverged")
        return 1.0
    out, recs = tune_stage(m, 2.0, oracle, [("forward", "m_B"), ("forward", "m_C")])
    assert recs[0].status == "failed" and recs[0].step == 0 and math.isnan(recs[0].L_plus)
    assert recs[1].status == "ok" and out == m
    with pytest.raises(FloatingPointError):
        tune_stage(m, 2.0, lambda mm: math.inf)


def test_sweep_record_round_trip_and_replay():
    m = MuPMultiplierSet.table13()
    oracle = lambda mm: (math.log2(mm.vector_lr["D"]) - 5.0) ** 2 + (math.log2(mm.forward["m_z"]) + 4.0) ** 2
    out, recs = tune_stage(m, 2.0, oracle, [("vector", "D"), ("forward", "m_z"), ("elr", "W_in")])
    back = [SweepRecord.from_json(r.to_json()) for r in recs]
    assert back == recs
    assert apply_records(m, back) == out
    assert out.vector_lr["D"] == 16.0 and out.forward["m_z"] == m.forward["m_z"] / 2


def test_tuning_schedule():
    assert tuning_schedule(4) == [2.0, 2.0, math.sqrt(2), math.sqrt(2)]
    assert tuning_schedule(3, 1) == [2.0, math.sqrt(2), math.sqrt(2)]


def test_forward_multipliers_follow_shapes():
    base = MuPMultiplierSet.table13()
    shapes = replace(REF_SHAPES, d=640, d_mlp=1920, n_heads_attn=6)
    moved = scale_multipliers(base, shapes=shapes)
    assert moved.forward["m_MLP"] == pytest.approx(base.forward["m_MLP"] * 4)
    assert moved.forward["m_attn"] == pytest.approx(base.forward["m_attn"] * 4)
    assert moved.tuned == base.tuned
