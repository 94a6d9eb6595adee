import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import solve_ivp

from safegrid.control import hz_to_rad
from safegrid.devices import (GfmParams, GfmState, SgParams, SgState, check_capacity, gfm_derivatives,
                              sg_derivatives)
from safegrid.errors import ConfigError

W0 = hz_to_rad(60.0)


def test_sg_equilibrium():
    p = SgParams(M=10, D=1, T_ch=0.5, R_gov=0.05)
    assert sg_derivatives(SgState(0.3, W0, 0.0), p, 0.0, W0) == (0.0, 0.0, 0.0)


def test_sg_swing_acceleration():
    p = SgParams(M=10, D=1, T_ch=0.5, R_gov=0.05)
    _, dw, _ = sg_derivatives(SgState(0.0, W0, 0.0), p, 0.5, W0)
    assert dw == pytest.approx(-0.05, abs=1e-15)


def test_sg_governor_rate():
    p = SgParams(M=10, D=1, T_ch=0.5, R_gov=0.05)
    _, _, dpm = sg_derivatives(SgState(0.0, W0 + 0.1, 0.0), p, 0.0, W0)
    assert dpm == pytest.approx(-4.0, rel=1e-12)


def test_sg_governor_reference_shifts_equilibrium():
    p = SgParams(M=10, D=1, T_ch=0.5, R_gov=0.05, P_ref=0.7)
    assert sg_derivatives(SgState(0.0, W0, 0.7), p, 0.7, W0) == (0.0, 0.0, 0.0)


def test_gfm_equilibrium():
    p = GfmParams(m_p=0.05, m_q=0.05, tau=0.01, S=1.0, V_set=1.02, Q_set=0.1)
    d = gfm_derivatives(GfmState(0.0, W0, 0.0, 1.0, P_set=0.3), p, 0.3, 0.1, 1.02, W0)
    assert max(abs(v) for v in d) < 1e-12


def test_gfm_frequency_rate():
    p = GfmParams(m_p=0.05, m_q=0.05, tau=0.01, S=1.0)
    _, dw, _, _ = gfm_derivatives(GfmState(0.0, W0, 0.0, 1.0), p, 0.1, 0.0, 1.0, W0)
    assert dw == pytest.approx(-0.5, rel=1e-12)


def test_gfm_voltage_loop():
    p = GfmParams(m_p=0.05, m_q=0.05, tau=0.01, S=1.0, k_pv=1, k_iv=10)
    _, _, dve, de = gfm_derivatives(GfmState(0.0, W0, 0.0, 1.0), p, 0.0, 0.0, 0.98, W0)
    assert dve == pytest.approx(2.0, rel=1e-12)
    assert de == pytest.approx(2.0, rel=1e-12)


@pytest.mark.parametrize("P, Q, S, ok", [(0.6, 0.8, 1.0, True), (0.0, 0.0, 0.3, True), (1.0, 0.1, 1.0, False)])
def test_check_capacity(P, Q, S, ok):
    assert check_capacity(P, Q, S) is ok


@pytest.mark.parametrize("field", ["m_p", "m_q", "tau", "S"])
def test_gfm_rejects_nonpositive(field):
    kw = dict(m_p=0.05, m_q=0.05, tau=0.01, S=1.0)
    kw[field] = 0.0
    with pytest.raises(ConfigError, match=field):
        GfmParams(**kw)


def test_gfm_zero_droop_message():
    with pytest.raises(ConfigError, match="droop gain must be positive"):
        GfmParams(m_p=0.0, m_q=0.05, tau=0.01, S=1.0)


@pytest.mark.parametrize("field", ["M", "T_ch", "R_gov"])
def test_sg_rejects_nonpositive(field):
    kw = dict(M=10, D=1, T_ch=0.5, R_gov=0.05)
    kw[field] = -1.0
    with pytest.raises(ConfigError, match=field):
        SgParams(**kw)


finite = st.floats(-5, 5, allow_nan=False)


@settings(max_examples=300, deadline=None)
@given(M=st.floats(0.1, 50), D=st.floats(0, 5), T=st.floats(0.05, 10), R=st.floats(0.01, 1),
       P=finite, dth=finite)
def test_sg_equilibrium_any_parameters(M, D, T, R, P, dth):
    p = SgParams(M=M, D=D, T_ch=T, R_gov=R, P_ref=P)
    assert max(abs(v) for v in sg_derivatives(SgState(dth, W0, P), p, P, W0)) < 1e-12


@settings(max_examples=300, deadline=None)
@given(mp=st.floats(1e-3, 5), mq=st.floats(1e-3, 1), tau=st.floats(1e-3, 1), P=finite, Q=finite,
       V=st.floats(0.8, 1.2))
def test_gfm_equilibrium_any_parameters(mp, mq, tau, P, Q, V):
    p = GfmParams(m_p=mp, m_q=mq, tau=tau, S=10.0, V_set=V, Q_set=Q)
    d = gfm_derivatives(GfmState(1.0, W0, 0.0, 1.0, P_set=P), p, P, Q, V, W0)
    assert max(abs(v) for v in d) < 1e-12


def _sg_flow(y, p, P):
    return np.array(sg_derivatives(SgState(*y), p, P, W0))


def test_sg_derivative_matches_flow_differences():
    """Central differences of the integrated flow converge to the field at O(h²)."""
    p = SgParams(M=2.0, D=0.5, T_ch=0.8, R_gov=0.1, P_ref=0.4)
    rng = np.random.default_rng(7)
    for _ in range(5):
        y0 = np.array([rng.uniform(-1, 1), W0 + rng.uniform(-1, 1), rng.uniform(0, 1)])
        field = _sg_flow(y0, p, 0.6)
        errs = []
        for h in (1e-2, 5e-3):
            fwd = solve_ivp(lambda t, y: _sg_flow(y, p, 0.6), (0, h), y0, rtol=1e-12, atol=1e-13).y[:, -1]
            bwd = solve_ivp(lambda t, y: _sg_flow(y, p, 0.6), (0, -h), y0, rtol=1e-12, atol=1e-13).y[:, -1]
            errs.append(np.max(np.abs((fwd - bwd) / (2 * h) - field)))
        assert errs[1] < errs[0] / 3.0 or errs[1] < 1e-9


def test_governor_settles_to_droop_value():
    p = SgParams(M=2.0, D=0.0, T_ch=0.5, R_gov=0.05)
    delta = 0.2
    # hold ω fixed: integrate the governor equation alone
    sol = solve_ivp(lambda t, y: [sg_derivatives(SgState(0.0, W0 + delta, y[0]), p, 0.0, W0)[2]],
                    (0, 20), [0.0], rtol=1e-12, atol=1e-12)
    assert sol.y[0, -1] == pytest.approx(-delta / 0.05, abs=1e-6)
    assert math.isfinite(sol.y[0, -1])
