import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from pidnowcast.grid import MeteoStack, PrecipSequence
from pidnowcast.physics import (ConsistencyConfig, MakkinkInputs, MissingTimestepError,
                                PhysicsShapeError, ResidualConfig, ResidualField,
                                consistency_score, differentiable_scores, makkink_et,
                                moisture_residual, precip_free_terms, sequence_scores,
                                spatial_gradient, specific_humidity_from_dew, svp_slope,
                                dew_from_specific_humidity)
from pidnowcast.tensor import Tensor, grad


def stack(q, t=0, u10=0.0, v10=0.0, u100=0.0, v100=0.0, r_s=0.0, temp=15.0):
    full = lambda v: np.broadcast_to(np.asarray(v, dtype=np.float64), q.shape)  # noqa: E731
    return MeteoStack(q=q, u10=full(u10), v10=full(v10), u100=full(u100), v100=full(v100),
                      r_s=full(r_s), temp=full(temp), dew=full(temp) - 2.0, timestamp=t)


def test_makkink_zero_radiation():
    assert makkink_et(MakkinkInputs(20.0, 0.0)) == 0.0


def test_makkink_reference_value():
    # slope 4098 * 2.3382 / 257.3^2 = 0.14473; 0.65 * 0.6868 * 500 / 2.45e6 * 3600
    assert math.isclose(float(svp_slope(20.0)), 0.14473, abs_tol=5e-5)
    assert math.isclose(float(makkink_et(MakkinkInputs(20.0, 500.0))), 0.32798, abs_tol=5e-5)


def test_makkink_linear_in_radiation():
    a = makkink_et(MakkinkInputs(20.0, 250.0))
    b = makkink_et(MakkinkInputs(20.0, 500.0))
    assert b == 2.0 * a


def test_makkink_rejects_negative_radiation():
    with pytest.raises(ValueError):
        MakkinkInputs(20.0, -1.0)


def test_saturation_humidity_at_20c():
    # e_s = 2.3382 kPa -> 0.622 e / (101.325 - 0.378 e)
    assert math.isclose(float(specific_humidity_from_dew(20.0)), 0.014480, abs_tol=2e-6)
    assert math.isclose(float(dew_from_specific_humidity(specific_humidity_from_dew(13.0))), 13.0,
                        abs_tol=1e-9)


def test_stationary_dry_atmosphere():
    q = np.full((4, 5), 0.008)
    res = moisture_residual(q, q, stack(q, u10=3.0, v100=-2.0), np.zeros((4, 5)))
    assert np.all(res.values == 0.0)


def test_source_balances_sink():
    q = np.full((3, 3), 0.008)
    m = stack(q, u10=1.5, v10=-4.0, r_s=400.0, temp=18.0)
    et = makkink_et(MakkinkInputs(m.temp, m.r_s))
    res = moisture_residual(q, q, m, et)
    assert_allclose(res.values, 0.0, atol=1e-15)


def test_ramp_stencil_by_hand():
    # q_curr - q_prev = 1e-4 * column; tendency -2j mm/h, u10 advection -3.6 mm/h
    q_prev = np.full((3, 3), 0.01)
    q_curr = q_prev + 1e-4 * np.arange(3.0)[None, :]
    res = moisture_residual(q_prev, q_curr, stack(q_curr, u10=1.0), np.zeros((3, 3)))
    expected = np.tile([-3.6, -5.6, -7.6], (3, 1))
    assert_allclose(res.values, expected, rtol=1e-5)


def test_quadratic_interior_stencil_exact():
    x = np.arange(7.0)
    q = 0.005 + 1e-4 * x[None, :] ** 2 + 2e-5 * x[None, :] + np.zeros((5, 1))
    ddx, ddy = spatial_gradient(q, 1.0, 1.0)
    exact = (2e-4 * x + 2e-5) / 1000.0
    assert_allclose(ddx[:, 1:-1], np.broadcast_to(exact[1:-1], (5, 5)), rtol=1e-12)
    assert np.all(ddy == 0.0)


def test_column_mass_scales_humidity_terms():
    rng = np.random.default_rng(0)
    q0, q1 = rng.uniform(0.005, 0.01, (2, 4, 4))
    m = stack(q1, u10=rng.normal(size=(4, 4)), v100=rng.normal(size=(4, 4)), r_s=300.0)
    a = moisture_residual(q0, q1, m, np.ones((4, 4)), ResidualConfig(column_mass=1000.0))
    b = moisture_residual(q0, q1, m, np.ones((4, 4)), ResidualConfig(column_mass=3000.0))
    for k in ("tendency", "adv10", "adv100"):
        assert_allclose(b.terms[k], 3.0 * a.terms[k], rtol=1e-14)
    assert_allclose(b.terms["et"], a.terms["et"])


def test_shape_mismatch():
    q = np.full((3, 3), 0.01)
    with pytest.raises(PhysicsShapeError):
        moisture_residual(q, q, stack(q), np.zeros((3, 4)))


@pytest.mark.parametrize("lam,scalar,eta", [(1.0, 0.0, 1.0), (1.0, math.log(2), 0.5),
                                            (2.0, 1.0, math.exp(-2.0))])
def test_score_analytic(lam, scalar, eta):
    res = ResidualField(np.full((2, 2), scalar))
    assert math.isclose(consistency_score(res, ConsistencyConfig(lam)), eta, rel_tol=1e-12)
    assert res.scalar == pytest.approx(scalar)


@settings(max_examples=50, deadline=None)
@given(a=st.floats(0, 50), b=st.floats(0, 50), lam=st.floats(0.01, 5))
def test_score_range_and_monotone(a, b, lam):
    cfg = ConsistencyConfig(lam)
    ea = consistency_score(ResidualField(np.array([a, -a])), cfg)
    eb = consistency_score(ResidualField(np.array([b, -b])), cfg)
    assert 0.0 <= ea <= 1.0
    if a < b and math.exp(-lam * a) > math.exp(-lam * b):
        assert ea > eb


def _meteo_series(n, h=4, w=4):
    return [stack(np.full((h, w), 0.008), t=30 * i) for i in range(n)]


def test_sequence_scores_length_and_ablation():
    pred = PrecipSequence.from_array(np.random.default_rng(1).uniform(0, 2, (6, 4, 4)), 30, 90)
    meteo = _meteo_series(10)
    eta = sequence_scores(pred, meteo)
    assert eta.shape == (6,) and np.all((eta > 0) & (eta <= 1))
    assert np.all(sequence_scores(pred, meteo, physics_enabled=False) == 1.0)


def test_sequence_scores_missing_step():
    pred = PrecipSequence.from_array(np.zeros((2, 4, 4)), 30, 30)
    with pytest.raises(MissingTimestepError):
        sequence_scores(pred, _meteo_series(2)[1:])


def test_differentiable_scores_match_numpy():
    rng = np.random.default_rng(2)
    meteo = [stack(rng.uniform(0.005, 0.01, (5, 5)), t=30 * i, u10=1.0, r_s=200.0) for i in range(4)]
    p = rng.uniform(0, 1, (3, 5, 5))
    pred = PrecipSequence.from_array(p, 30, 30)
    free = precip_free_terms([30, 60, 90], meteo, 30)
    x = Tensor(p, requires_grad=True)
    eta = differentiable_scores(x, free)
    assert_allclose(eta.data, sequence_scores(pred, meteo), rtol=1e-5)
    (g,) = grad(eta.sum(), [x])
    assert np.all(np.isfinite(g)) and np.any(g != 0)
