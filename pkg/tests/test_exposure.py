from __future__ import annotations

import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from resistsim.errors import InvalidArgument
from resistsim.exposure import (ExposureParams, intensity_profile, solve_exposure_closed_form,
                                solve_exposure_general)
from resistsim.grids import Field2D


def flat(value, shape=(3, 3)):
    return Field2D(np.full(shape, value, dtype=float), 7.0)


def test_params_geometry_and_validation():
    p = ExposureParams()
    assert p.dz_nm == pytest.approx(3.0)
    assert p.z_nm()[-1] == pytest.approx(75.0)
    for bad in (dict(A=-1.0), dict(B=-0.1), dict(C_eff=0.0), dict(nz=1), dict(thickness_nm=0.0)):
        with pytest.raises(InvalidArgument):
            ExposureParams(**bad)


def test_unit_dose_without_absorption():
    M = solve_exposure_closed_form(flat(1.0), ExposureParams(B=0.0, C_eff=1.0))
    np.testing.assert_allclose(M.values, math.exp(-1.0), rtol=1e-15)


def test_zero_dose_leaves_inhibitor_intact():
    M = solve_exposure_closed_form(flat(0.0), ExposureParams())
    assert np.all(M.values == 1.0)


def test_closed_form_bottom_value_matches_high_precision():
    M = solve_exposure_closed_form(flat(1.0), ExposureParams(B=0.01, C_eff=1.0))
    mp.mp.dps = 30
    expect = float(mp.exp(-mp.exp(mp.mpf("-0.75"))))
    assert M.values[-1, 0, 0] == pytest.approx(expect, abs=1e-15)
    assert expect == pytest.approx(0.6236, abs=1e-4)


def test_closed_form_rejects_bleaching():
    with pytest.raises(InvalidArgument):
        solve_exposure_closed_form(flat(1.0), ExposureParams(A=0.001))


def test_negative_aerial_rejected():
    with pytest.raises(InvalidArgument):
        solve_exposure_closed_form(flat(-0.1), ExposureParams())


def test_general_matches_closed_form_without_bleaching():
    rng = np.random.default_rng(3)
    aerial = Field2D(rng.random((16, 16)) * 2.0, 7.0)
    p = ExposureParams(B=0.006, C_eff=1.3)
    diff = solve_exposure_general(aerial, p, nt=256).values - solve_exposure_closed_form(aerial, p).values
    assert np.abs(diff).max() < 1e-6


@pytest.mark.parametrize("A,B", [(0.0, 0.0), (0.005, 0.005), (0.02, 0.0)])
def test_general_zero_dose_is_exactly_one(A, B):
    M = solve_exposure_general(flat(0.0), ExposureParams(A=A, B=B), nt=16)
    assert np.all(M.values == 1.0)


def test_general_self_convergence_with_bleaching():
    p = ExposureParams(A=0.005, B=0.005, C_eff=1.0)
    coarse = solve_exposure_general(flat(1.0), p, nt=64).values
    fine = solve_exposure_general(flat(1.0), p, nt=4096).values
    assert np.abs(coarse - fine).max() < 1e-4


def test_general_rejects_bad_step_count():
    with pytest.raises(InvalidArgument):
        solve_exposure_general(flat(1.0), ExposureParams(), nt=0)


def test_intensity_without_absorption_equals_aerial():
    aerial = Field2D(np.random.default_rng(0).random((4, 4)), 7.0)
    p = ExposureParams(A=0.0, B=0.0)
    I = intensity_profile(aerial, solve_exposure_closed_form(aerial, p), p)
    np.testing.assert_allclose(I.values, np.broadcast_to(aerial.values, I.values.shape), rtol=1e-15)


def test_intensity_beer_lambert_decay():
    p = ExposureParams(A=0.0, B=0.01)
    I = intensity_profile(flat(1.0), solve_exposure_closed_form(flat(1.0), p), p)
    assert I.values[-1, 0, 0] == pytest.approx(math.exp(-0.75), rel=1e-12)
    assert math.exp(-0.75) == pytest.approx(0.47237, abs=1e-5)


def test_intensity_unexposed_film_with_bleaching():
    from resistsim.grids import Field3D

    p = ExposureParams(A=0.005, B=0.005)
    M = Field3D(np.ones((p.nz, 2, 2)), 7.0, p.dz_nm)
    I = intensity_profile(flat(1.0, (2, 2)), M, p)
    assert I.values[-1, 0, 0] == pytest.approx(math.exp(-0.75), rel=1e-12)


@settings(max_examples=25, deadline=None)
@given(A=st.floats(0.0, 0.02), B=st.floats(0.0, 0.02), C=st.floats(0.1, 3.0), seed=st.integers(0, 999))
def test_exposure_invariants(A, B, C, seed):
    rng = np.random.default_rng(seed)
    r = rng.random((4, 4)) * 2.0
    r[0, 0] = 0.0
    aerial = Field2D(r, 7.0)
    p = ExposureParams(A=A, B=B, C_eff=C, nz=11)
    M = solve_exposure_general(aerial, p, nt=32)
    assert np.all(M.values > 0.0) and np.all(M.values <= 1.0)
    assert np.all(M.values[:, 0, 0] == 1.0)
    I = intensity_profile(aerial, M, p)
    np.testing.assert_array_equal(I.values[0], r)
    assert np.all(np.diff(I.values, axis=0) <= 1e-15)


@settings(max_examples=25, deadline=None)
@given(A=st.floats(0.0, 0.02), B=st.floats(0.0, 0.02), C=st.floats(0.1, 3.0))
def test_inhibitor_monotone_in_dose_and_rate(A, B, C):
    doses = Field2D(np.linspace(0.0, 2.0, 9)[None, :], 7.0)
    p = ExposureParams(A=A, B=B, C_eff=C, nz=11)
    M = solve_exposure_general(doses, p, nt=32).values
    assert np.all(np.diff(M, axis=2) <= 1e-15)
    M_more = solve_exposure_general(doses, ExposureParams(A=A, B=B, C_eff=C * 1.5, nz=11), nt=32).values
    assert np.all(M_more <= M + 1e-15)
