"""Synchronous generator and grid-forming storage dynamics.

The ``*_rhs`` functions are compiled and work elementwise, so the simulator
calls them on whole arrays of units; :func:`sg_derivatives` and
:func:`gfm_derivatives` are the per-unit forms taking dataclasses.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numba as nb
import numpy as np

from .errors import ConfigError

log = logging.getLogger(__name__)

CAPACITY_TOL = 1e-9
# Q-V loop gains: a fast, well-damped voltage loop; override per unit if needed.
DEFAULT_KPV = 1.0
DEFAULT_KIV = 10.0
DEFAULT_GFM_REACTANCE = 0.05


@dataclass(frozen=True)
class SgParams:
    """Classical generator with first-order governor.

    ``P_ref`` is the governor load reference; with the default of zero the
    governor equation is the bare droop loop and ``P_m`` is read as a deviation.
    The simulator sets it to the pre-disturbance dispatch.
    """

    M: float
    D: float
    T_ch: float
    R_gov: float
    x_d: float = 0.2
    E: float = 1.0
    P_ref: float = 0.0

    def __post_init__(self):
        errors = [f"{name} must be positive" for name in ("M", "T_ch", "R_gov", "x_d")
                  if not getattr(self, name) > 0]
        if errors:
            raise ConfigError("; ".join(errors))


@dataclass
class SgState:
    theta: float
    omega: float
    P_m: float


@dataclass(frozen=True)
class GfmParams:
    m_p: float
    m_q: float
    tau: float
    S: float
    k_pv: float = DEFAULT_KPV
    k_iv: float = DEFAULT_KIV
    x_c: float = DEFAULT_GFM_REACTANCE
    V_set: float = 1.0
    Q_set: float = 0.0

    def __post_init__(self):
        checks = {"m_p": "droop gain must be positive", "m_q": "droop gain must be positive",
                  "tau": "filter time constant must be positive", "S": "rating must be positive",
                  "x_c": "coupling reactance must be positive"}
        errors = [f"{name}: {msg}" for name, msg in checks.items() if not getattr(self, name) > 0]
        if errors:
            raise ConfigError("; ".join(errors))


@dataclass
class GfmState:
    theta: float
    omega: float
    V_e: float
    E: float
    P_set: float = 0.0


@dataclass(frozen=True)
class SgUnit:
    """A generator placed at a bus.  ``dispatch`` of ``None`` marks the slack unit."""

    name: str
    bus: int
    params: SgParams
    dispatch: float | None = None
    v_set: float = 1.0


@dataclass(frozen=True)
class GfmUnit:
    name: str
    bus: int
    params: GfmParams


@nb.njit(cache=True)
def sg_rhs(omega, P_m, P, M, D, T_ch, R_gov, P_ref, omega0):
    dtheta = omega - omega0
    domega = (D * (omega0 - omega) + P_m - P) / M
    dP_m = -(P_m - P_ref + (omega - omega0) / R_gov) / T_ch
    return dtheta, domega, dP_m


@nb.njit(cache=True)
def gfm_rhs(omega, V_e, P_set, P, Q, V, m_p, m_q, tau, k_pv, k_iv, V_set, Q_set, omega0):
    dtheta = omega - omega0
    domega = (omega0 - omega + m_p * (P_set - P)) / tau
    dV_e = (V_set - V - V_e + m_q * (Q_set - Q)) / tau
    dE = k_pv * dV_e + k_iv * V_e
    return dtheta, domega, dV_e, dE


def sg_derivatives(state: SgState, params: SgParams, P_injected: float, omega0: float):
    """Time derivatives ``(dθ, dω, dP_m)`` of one generator."""
    p = params
    return sg_rhs(state.omega, state.P_m, P_injected, p.M, p.D, p.T_ch, p.R_gov, p.P_ref, omega0)


def gfm_derivatives(state: GfmState, params: GfmParams, P_injected: float, Q_injected: float,
                    V_terminal: float, omega0: float):
    """Time derivatives ``(dθ, dω, dVᵉ, dE)`` of one grid-forming unit."""
    p = params
    return gfm_rhs(state.omega, state.V_e, state.P_set, P_injected, Q_injected, V_terminal,
                   p.m_p, p.m_q, p.tau, p.k_pv, p.k_iv, p.V_set, p.Q_set, omega0)


def check_capacity(P: float, Q: float, S: float) -> bool:
    """True when the apparent power sits within the rating ``S``."""
    ok = math.hypot(P, Q) <= S + CAPACITY_TOL
    if not ok:
        log.debug("apparent power %.6g exceeds rating %.6g", math.hypot(P, Q), S)
    return ok


def sg_param_arrays(units):
    """Stack generator parameters into arrays keyed by field name."""
    fields = ("M", "D", "T_ch", "R_gov", "x_d", "E", "P_ref")
    return {f: np.array([getattr(u.params, f) for u in units], dtype=float) for f in fields}


def gfm_param_arrays(units):
    fields = ("m_p", "m_q", "tau", "S", "k_pv", "k_iv", "x_c", "V_set", "Q_set")
    return {f: np.array([getattr(u.params, f) for u in units], dtype=float) for f in fields}
