from __future__ import annotations

import json
import math
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from resistsim.develop import develop_vertical, mack_rate
from resistsim.errors import InvalidArgument, NumericalError
from resistsim.exposure import ExposureParams, solve_exposure_general
from resistsim.gradcal import (BCE_EPS, DOMAINS, PARAM_NAMES, AdamState, CalibRecord, ResistParams,
                               Schedule, adam_step, batch_loss_and_grad, calibrate, dataset_loss,
                               default_params, default_scales, forward_depth, grad_params,
                               loss_and_grad, refine_tau, soft_loss)
from resistsim.grids import BinaryImage, Field2D, binarize

GOLDEN = Path(__file__).parent / "data" / "golden_depth.json"


def random_record(rng, size=16, split="calibration"):
    return CalibRecord(Field2D(rng.random((size, size)) * 2.0, 7.0),
                       BinaryImage((rng.random((size, size)) > 0.5).astype(np.uint8), 7.0), split)


def random_params(rng):
    p = default_params().with_values({
        "C_eff": rng.uniform(1, 4), "B": rng.uniform(0.002, 0.01), "m_th": rng.uniform(0.3, 0.7),
        "r_max": rng.uniform(1.5, 4), "r_min": rng.uniform(0.01, 0.1), "t_dev": rng.uniform(30, 80),
        "tau": rng.uniform(0.3, 0.7)})
    return replace(p, calibratable=frozenset(PARAM_NAMES))


# ------------------------------------------------------------------ params

def test_default_params_initial_regime():
    p = default_params()
    assert p.mack.r_max * p.mack.t_dev == pytest.approx(2 * p.exposure.thickness_nm)
    assert p.mack.r_min == pytest.approx(0.01 * p.mack.r_max)
    assert p.exposure.B == pytest.approx(0.006186)
    assert (p.exposure.C_eff, p.mack.m_th, p.tau, p.s, p.mack.n) == (1.0, 0.5, 0.5, 6.0, 5)
    assert "s" not in p.calibratable


def test_params_validation_and_updates():
    with pytest.raises(InvalidArgument):
        ResistParams(tau=1.0)
    with pytest.raises(InvalidArgument):
        ResistParams(s=0.0)
    with pytest.raises(InvalidArgument):
        ResistParams(calibratable=frozenset({"bogus"}))
    with pytest.raises(KeyError):
        default_params().with_values({"bogus": 1.0})
    p = default_params().with_values({"B": 0.01, "tau": 0.4})
    assert p.get("B") == 0.01 and p.values()["tau"] == 0.4


def test_record_requires_matching_grids():
    with pytest.raises(InvalidArgument):
        CalibRecord(Field2D(np.zeros((2, 2)), 7.0), BinaryImage(np.zeros((2, 3)), 7.0))
    with pytest.raises(InvalidArgument):
        CalibRecord(Field2D(np.zeros((2, 2)), 7.0), BinaryImage(np.zeros((2, 2)), 1.0))


# ----------------------------------------------------------------- forward

def test_forward_dark_aerial_develops_at_minimum_rate():
    p = default_params()
    d = forward_depth(Field2D(np.zeros((3, 3)), 7.0), p).values
    expect = min(1.0, p.mack.r_min * p.mack.t_dev / p.exposure.thickness_nm)
    np.testing.assert_allclose(d, expect, rtol=1e-12)


def test_forward_saturated_aerial_develops_at_maximum_rate():
    p = default_params(t_dev=20.0).with_values({"r_max": 1.5, "r_min": 0.015})
    d = forward_depth(Field2D(np.full((2, 2), 1e4), 7.0), p).values
    expect = min(1.0, (p.mack.r_max + p.mack.r_min) * p.mack.t_dev / p.exposure.thickness_nm)
    np.testing.assert_allclose(d, expect, rtol=1e-9)


def test_forward_rejects_bleaching_and_negative_aerial():
    with pytest.raises(InvalidArgument):
        forward_depth(Field2D(np.ones((2, 2)), 7.0), replace(default_params(), exposure=ExposureParams(A=0.01)))
    with pytest.raises(InvalidArgument):
        forward_depth(Field2D(-np.ones((2, 2)), 7.0), default_params())


def golden():
    raw = json.loads(GOLDEN.read_text())
    th = raw["theta"]
    params = default_params(t_dev=th["t_dev"]).with_values(
        {k: th[k] for k in ("B", "C_eff", "m_th", "r_max", "r_min")})
    return Field2D(np.array(raw["aerial"]), raw["pitch_nm"]), np.array(raw["depth"]), params


def test_forward_matches_high_precision_golden_depth():
    aerial, depth, params = golden()
    assert 0 < depth.min() and depth.max() == 1.0
    np.testing.assert_allclose(forward_depth(aerial, params).values, depth, atol=1e-6)


def test_golden_depth_through_general_exposure_solver():
    aerial, depth, params = golden()
    M = solve_exposure_general(aerial, params.exposure, nt=256)
    d = develop_vertical(mack_rate(M, params.mack), params.mack.t_dev).values
    np.testing.assert_allclose(d, depth, atol=1e-6)


def test_forward_chunking_is_invisible(monkeypatch):
    import resistsim.gradcal as gc

    aerial = Field2D(np.random.default_rng(0).random((40, 12)), 7.0)
    whole = forward_depth(aerial, default_params()).values
    monkeypatch.setattr(gc, "_CHUNK_ELEMENTS", 26 * 12 * 3)
    assert np.array_equal(forward_depth(aerial, default_params()).values, whole)


# -------------------------------------------------------------------- loss

def test_loss_at_threshold_is_ln2():
    wafer = BinaryImage(np.random.default_rng(0).integers(0, 2, (5, 5)), 1.0)
    assert soft_loss(Field2D(np.full((5, 5), 0.37), 1.0), wafer, 0.37, 6.0) == pytest.approx(math.log(2), rel=1e-12)


def test_loss_on_perfect_binary_depth():
    d = np.zeros((4, 4))
    d[:2] = 1.0
    loss = soft_loss(Field2D(d, 1.0), BinaryImage(d.astype(np.uint8), 1.0), 0.5, 6.0)
    assert loss == pytest.approx(math.log1p(math.exp(-3.0)), rel=1e-12)
    assert loss == pytest.approx(0.04859, abs=1e-5)


def naive_loss(depth, wafer, tau, s):
    total = 0.0
    for d, w in zip(depth.ravel(), wafer.ravel()):
        p = 1.0 / (1.0 + math.exp(-s * (d - tau)))
        p = min(max(p, BCE_EPS), 1.0 - BCE_EPS)
        total += -(w * math.log(p) + (1 - w) * math.log(1 - p))
    return total / depth.size


def test_loss_matches_scalar_oracle():
    rng = np.random.default_rng(8)
    d, w = rng.random((8, 8)), rng.integers(0, 2, (8, 8))
    got = soft_loss(Field2D(d, 1.0), BinaryImage(w, 1.0), 0.45, 6.0)
    assert got == pytest.approx(naive_loss(d, w, 0.45, 6.0), abs=1e-12)


@settings(max_examples=50)
@given(seed=st.integers(0, 10_000), tau=st.floats(0.05, 0.95), s=st.floats(0.5, 50))
def test_loss_symmetric_under_complement(seed, tau, s):
    rng = np.random.default_rng(seed)
    d, w = rng.random((6, 6)), rng.integers(0, 2, (6, 6))
    a = soft_loss(Field2D(d, 1.0), BinaryImage(w, 1.0), tau, s)
    b = soft_loss(Field2D(1 - d, 1.0), BinaryImage(1 - w, 1.0), 1 - tau, s)
    assert a == pytest.approx(b, rel=1e-9, abs=1e-12)
    assert 0 < a < -math.log(BCE_EPS) + 1e-9 and math.isfinite(a)


def test_loss_shape_mismatch():
    with pytest.raises(InvalidArgument):
        soft_loss(Field2D(np.zeros((2, 2)), 1.0), BinaryImage(np.zeros((2, 3)), 1.0), 0.5, 6.0)


# --------------------------------------------------------------- gradients

def test_loss_and_grad_agrees_with_forward_loss():
    rng = np.random.default_rng(1)
    rec, p = random_record(rng), random_params(rng)
    loss, _ = loss_and_grad(rec, p)
    assert loss == pytest.approx(soft_loss(forward_depth(rec.aerial, p), rec.wafer, p.tau, p.s), abs=1e-14)


def test_gradients_match_central_differences():
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(20):
        rec, p = random_record(rng), random_params(rng)
        grads = grad_params(rec, p)
        for name in PARAM_NAMES:
            v = p.get(name)
            h = 1e-5 * abs(v)
            up = loss_and_grad(rec, p.with_values({name: v + h}))[0]
            down = loss_and_grad(rec, p.with_values({name: v - h}))[0]
            fd = (up - down) / (2 * h)
            worst = max(worst, abs(grads[name] - fd) / (abs(fd) + 1e-8))
    assert worst < 1e-4


def test_threshold_gradient_sign_when_everything_clears():
    p = default_params(t_dev=200.0)
    rec = CalibRecord(Field2D(np.full((4, 4), 3.0), 7.0), BinaryImage(np.ones((4, 4)), 7.0))
    loss, g = loss_and_grad(rec, p)
    assert loss < 0.06 and 0 < g["tau"] < 0.3


def test_dark_aerial_gives_no_dose_gradient():
    rec = CalibRecord(Field2D(np.zeros((4, 4)), 7.0), BinaryImage(np.ones((4, 4)), 7.0))
    g = grad_params(rec, default_params())
    assert g["C_eff"] == 0.0 and g["B"] == 0.0


def test_frozen_parameters_have_zero_gradient():
    rng = np.random.default_rng(2)
    p = replace(random_params(rng), calibratable=frozenset({"tau"}))
    g = grad_params(random_record(rng), p)
    assert all(g[n] == 0.0 for n in PARAM_NAMES if n != "tau") and g["tau"] != 0.0


def test_batch_loss_is_mean_of_record_losses():
    rng = np.random.default_rng(4)
    recs = [random_record(rng) for _ in range(5)]
    p = default_params()
    mean, grads = batch_loss_and_grad(recs, p)
    singles = [loss_and_grad(r, p) for r in recs]
    assert mean == pytest.approx(np.mean([s[0] for s in singles]), abs=1e-12)
    assert grads["C_eff"] == pytest.approx(np.mean([s[1]["C_eff"] for s in singles]), rel=1e-12)
    assert dataset_loss(recs, p) == pytest.approx(mean, abs=1e-12)


# -------------------------------------------------------------------- adam

def scalar_adam(grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    x, m, v, path = 0.0, 0.0, 0.0, []
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
        path.append(x)
    return path


def tau_only():
    return replace(default_params(), calibratable=frozenset({"tau"}))


def test_first_adam_step_moves_by_learning_rate():
    p = tau_only()
    new, state = adam_step(p, {"tau": 0.37}, AdamState(lr=0.01, scales={"tau": 1.0}))
    assert p.tau - new.tau == pytest.approx(0.01, rel=1e-6)
    assert state.step == 1
    new, _ = adam_step(p, {"tau": -5.0}, AdamState(lr=0.01))
    assert new.tau - p.tau == pytest.approx(0.01, rel=1e-6)


def test_scaled_adam_step_moves_by_scale_times_lr():
    p = replace(default_params(), calibratable=frozenset({"r_max"}))
    new, _ = adam_step(p, {"r_max": 2.0}, AdamState(lr=0.01, scales={"r_max": p.mack.r_max}))
    assert p.mack.r_max - new.mack.r_max == pytest.approx(0.01 * p.mack.r_max, rel=1e-6)


def test_zero_gradient_leaves_params_and_decays_moments():
    p = tau_only()
    state = AdamState(lr=0.01, step=3, m={"tau": 0.2}, v={"tau": 0.04})
    new, st2 = adam_step(p, {"tau": 0.0}, state)
    assert new.tau == pytest.approx(p.tau - 0.01 * (0.18 / (1 - 0.9**4)) / (math.sqrt(0.03996 / (1 - 0.999**4)) + 1e-8))
    new0, st0 = adam_step(p, {"tau": 0.0}, AdamState(lr=0.01))
    assert new0.tau == p.tau
    assert st2.m["tau"] == pytest.approx(0.18) and st2.v["tau"] == pytest.approx(0.03996)


def test_constant_gradient_gives_equal_steps_like_reference():
    p, state = tau_only(), AdamState(lr=0.01)
    path = []
    for _ in range(2):
        p, state = adam_step(p, {"tau": 0.8}, state)
        path.append(p.tau)
    ref = scalar_adam([0.8, 0.8], 0.01)
    steps = [0.5 - path[0], path[0] - path[1]]
    assert steps[1] == pytest.approx(steps[0], rel=0.01)
    np.testing.assert_allclose(np.array(path) - 0.5, ref, rtol=1e-12)


def test_adam_clamps_to_domain_and_rejects_nonfinite():
    p = tau_only().with_values({"tau": 2e-4})
    new, _ = adam_step(p, {"tau": 1.0}, AdamState(lr=0.5))
    assert new.tau == DOMAINS["tau"][0]
    with pytest.raises(NumericalError):
        adam_step(p, {"tau": float("nan")}, AdamState())


def test_default_scales():
    s = default_scales(default_params())
    assert s["tau"] == 1.0 and s["m_th"] == 1.0
    assert s["r_max"] == pytest.approx(2.5) and "s" not in s


# --------------------------------------------------------------- calibrate

def small_dataset(seed=0, n=4, size=16):
    rng = np.random.default_rng(seed)
    truth = default_params().with_values({"C_eff": 1.5, "m_th": 0.45})
    out = []
    for i in range(n):
        aerial = Field2D(rng.random((size, size)) * 1.5, 7.0)
        out.append(CalibRecord(aerial, binarize(forward_depth(aerial, truth), truth.tau),
                               "calibration" if i < n - 1 else "test"))
    return out, truth


def test_learning_rate_schedule_trace():
    data, truth = small_dataset()
    res = calibrate(data, truth, Schedule(batch_size=16), seed=0)
    lrs = {row.epoch: row.lr for row in res.trace}
    for e in (1, 2, 3):
        assert lrs[e] == pytest.approx(1e-2)
    for e in (4, 5, 6):
        assert lrs[e] == pytest.approx(3e-3)
    for e in (7, 8, 9):
        assert lrs[e] == pytest.approx(9e-4)


def test_zero_learning_rate_returns_init():
    data, truth = small_dataset()
    init = truth.with_values({"C_eff": 1.2})
    res = calibrate(data, init, Schedule(lr=0.0))
    assert res.params == init


def test_single_record_at_truth_never_returns_worse():
    data, truth = small_dataset(n=2)
    record = data[0]
    # the surrogate keeps rewarding depth further from tau, so truth is not stationary
    assert abs(grad_params(record, truth)["C_eff"]) > 1e-4
    res = calibrate([record], truth, Schedule(), polish_tau=False)
    assert res.best_loss <= dataset_loss([record], truth) + 1e-12
    # the surrogate optimum may flip a few pixels; the threshold polish recovers them
    polished = calibrate([record], truth, Schedule()).params
    pred = binarize(forward_depth(record.aerial, polished), polished.tau)
    assert np.array_equal(pred.values, record.wafer.values)


def test_calibration_is_deterministic_and_improves():
    data, truth = small_dataset(seed=3, n=6)
    init = truth.with_values({"C_eff": 1.2, "r_max": 3.0, "m_th": 0.55})
    a = calibrate(data, init, Schedule(epochs=4, batch_size=2), seed=5)
    b = calibrate(data, init, Schedule(epochs=4, batch_size=2), seed=5)
    assert a.params == b.params and a.trace == b.trace
    calib = [r for r in data if r.split == "calibration"]
    assert a.best_loss <= dataset_loss(calib, init)


def test_calibrate_needs_calibration_records():
    data, truth = small_dataset()
    with pytest.raises(InvalidArgument):
        calibrate([r for r in data if r.split == "test"], truth)


def test_refine_tau_is_exact_minimiser():
    data, truth = small_dataset(seed=6, n=3)
    p = truth.with_values({"C_eff": 1.3, "tau": 0.3})
    tuned = refine_tau(data, p)

    def errors(tau):
        return sum(int(np.count_nonzero(binarize(forward_depth(r.aerial, p), tau).values != r.wafer.values))
                   for r in data)

    best = errors(tuned.tau)
    assert all(best <= errors(t) for t in np.linspace(0.02, 0.98, 97))
