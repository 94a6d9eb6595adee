"""Fixed-step transient simulation of the coupled device/network system.

The integrator is classical RK4 with the network solved at every stage
(partitioned scheme).  Control layers run on integer tick counters so that
set-point changes land exactly on the safety and consensus grids.
"""
from __future__ import annotations

import copy
import dataclasses
import logging
import math
from dataclasses import dataclass, field

import numba as nb
import numpy as np

from . import control as ctl
from .devices import gfm_param_arrays, gfm_rhs, sg_param_arrays, sg_rhs
from .errors import (ConfigError, InitializationError, MetricError, SafegridError,
                     SimulationAbort, SolverError)
from .netmodel import (NEWTON_MAX_ITER, NEWTON_TOL, DeviceCoupling, GridModel, _newton_kernel,
                       apply_topology_event, assemble_ybus, newton_power_flow)

log = logging.getLogger(__name__)

EQUILIBRIUM_TOL = 1e-9

_SG_ROWS = ("E", "M", "D", "T_ch", "R_gov", "P_ref")
_GFM_ROWS = ("m_p", "m_q", "tau", "k_pv", "k_iv", "V_set", "Q_set")


@nb.njit(cache=True)
def _rhs_kernel(x, p_set, V, Y, Sbus, pq, sgp, sg_on, gp, gterm, ns, ng, w0):
    n = V.shape[0] - ns - ng
    Vw = V.copy()
    o = 3 * ns
    for k in range(ns):
        Vw[n + k] = sgp[0, k] * np.exp(1j * x[k])
    for k in range(ng):
        Vw[n + ns + k] = x[o + 3 * ng + k] * np.exp(1j * x[o + k])
    Vs, _, F, ok = _newton_kernel(Y, Vw, Sbus, np.empty(0, np.int64), pq, NEWTON_TOL, NEWTON_MAX_ITER)
    dx = np.zeros_like(x)
    S_int = np.zeros(ns + ng, np.complex128)
    if not ok:
        return dx, Vs, S_int, False, F
    for k in range(ns + ng):
        acc = 0j
        for j in range(Vs.shape[0]):
            acc += Y[n + k, j] * Vs[j]
        S_int[k] = Vs[n + k] * np.conj(acc)
    P = S_int.real.copy()
    Q = S_int.imag.copy()
    if ns:
        dth, dw, dpm = sg_rhs(x[ns:2 * ns], x[2 * ns:o], P[:ns], sgp[1], sgp[2], sgp[3], sgp[4],
                              sgp[5], w0)
        for k in range(ns):
            if sg_on[k]:
                dx[k] = dth[k]
                dx[ns + k] = dw[k]
                dx[2 * ns + k] = dpm[k]
    if ng:
        Vt = np.empty(ng)
        for k in range(ng):
            Vt[k] = abs(Vs[gterm[k]])
        dth, dw, dve, de = gfm_rhs(x[o + ng:o + 2 * ng], x[o + 2 * ng:o + 3 * ng], p_set, P[ns:], Q[ns:],
                                   Vt, gp[0], gp[1], gp[2], gp[3], gp[4], gp[5], gp[6], w0)
        dx[o:o + ng] = dth
        dx[o + ng:o + 2 * ng] = dw
        dx[o + 2 * ng:o + 3 * ng] = dve
        dx[o + 3 * ng:o + 4 * ng] = de
    return dx, Vs, S_int, True, F


@nb.njit(cache=True)
def _rk4_kernel(x, p_set, V, h, Y, Sbus, pq, sgp, sg_on, gp, gterm, ns, ng, w0):
    k1, V1, S, ok, F = _rhs_kernel(x, p_set, V, Y, Sbus, pq, sgp, sg_on, gp, gterm, ns, ng, w0)
    if not ok:
        return x, V1, S, False, F
    k2, V2, S, ok, F = _rhs_kernel(x + 0.5 * h * k1, p_set, V1, Y, Sbus, pq, sgp, sg_on, gp, gterm, ns, ng, w0)
    if not ok:
        return x, V2, S, False, F
    k3, V3, S, ok, F = _rhs_kernel(x + 0.5 * h * k2, p_set, V2, Y, Sbus, pq, sgp, sg_on, gp, gterm, ns, ng, w0)
    if not ok:
        return x, V3, S, False, F
    k4, V4, S, ok, F = _rhs_kernel(x + h * k3, p_set, V3, Y, Sbus, pq, sgp, sg_on, gp, gterm, ns, ng, w0)
    if not ok:
        return x, V4, S, False, F
    x_new = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    # solve at the new state; its derivative is discarded, the network solution is kept
    _, V_new, S_new, ok, F = _rhs_kernel(x_new, p_set, V3, Y, Sbus, pq, sgp, sg_on, gp, gterm, ns, ng, w0)
    return x_new, V_new, S_new, ok, F


@dataclass(frozen=True)
class ScheduleConfig:
    step: float = 1e-3
    end_time: float = 60.0
    safety_period: float = 0.05
    consensus_period: float = 4.0
    abort_band_hz: float = 5.0
    events: tuple = ()

    def __post_init__(self):
        if not self.step > 0 or not self.end_time >= 0:
            raise ConfigError("step must be positive and end time nonnegative")
        if self.step > self.safety_period + 1e-12:
            raise ConfigError("integration step exceeds the safety period")
        for name in ("safety_period", "consensus_period"):
            ratio = getattr(self, name) / self.step
            if abs(ratio - round(ratio)) > 1e-9 * ratio:
                raise ConfigError(f"{name} is not an integer multiple of the step")
        ratio = self.consensus_period / self.safety_period
        if abs(ratio - round(ratio)) > 1e-9 * ratio:
            raise ConfigError("safety period does not divide the consensus period")

    @classmethod
    def from_control(cls, cfg: ctl.ControlConfig, step=1e-3, end_time=60.0, **kw):
        return cls(step=step, end_time=end_time, safety_period=cfg.safety_period,
                   consensus_period=cfg.consensus_period, **kw)

    @property
    def n_steps(self) -> int:
        return int(round(self.end_time / self.step))

    @property
    def safety_every(self) -> int:
        return int(round(self.safety_period / self.step))

    @property
    def consensus_every(self) -> int:
        return int(round(self.consensus_period / self.step))


@dataclass
class SystemState:
    """Everything that evolves during a run.  ``x`` stacks the device states as
    ``[sg θ, sg ω, sg P_m, gfm θ, gfm ω, gfm Vᵉ, gfm E]``."""

    step: int
    t: float
    x: np.ndarray
    V: np.ndarray              # complex voltages, physical then internal buses
    p_con: np.ndarray
    p_set: np.ndarray
    p_low: np.ndarray
    p_up: np.ndarray
    bus_omega: np.ndarray      # filtered bus frequency estimate, rad/s
    model: GridModel
    fired: int = 0             # number of scenario events already applied
    S_int: np.ndarray = None   # complex internal-bus injections at the current state

    def copy(self):
        return copy.deepcopy(self)


@dataclass
class TrajectoryLog:
    t: np.ndarray
    sg_names: tuple
    gfm_names: tuple
    bus_ids: tuple
    sg_theta: np.ndarray
    sg_omega: np.ndarray
    sg_pm: np.ndarray
    sg_p: np.ndarray
    gfm_theta: np.ndarray
    gfm_omega: np.ndarray
    gfm_ve: np.ndarray
    gfm_e: np.ndarray
    p_con: np.ndarray
    p_low: np.ndarray
    p_up: np.ndarray
    p_set: np.ndarray
    p_inj: np.ndarray
    q_inj: np.ndarray
    bus_v: np.ndarray
    bus_omega: np.ndarray
    coi_omega: np.ndarray
    mode: str = ""
    omega0: float = ctl.hz_to_rad(60.0)
    m_p: np.ndarray = field(default_factory=lambda: np.zeros(0))
    events: list = field(default_factory=list)   # (time, description)

    @classmethod
    def allocate(cls, n, sg_names, gfm_names, bus_ids, **kw):
        ns, ng, nb = len(sg_names), len(gfm_names), len(bus_ids)
        arrays = {name: np.zeros((n, ns)) for name in ("sg_theta", "sg_omega", "sg_pm", "sg_p")}
        arrays.update({name: np.zeros((n, ng)) for name in
                       ("gfm_theta", "gfm_omega", "gfm_ve", "gfm_e", "p_con", "p_low", "p_up",
                        "p_set", "p_inj", "q_inj")})
        arrays.update(bus_v=np.zeros((n, nb)), bus_omega=np.zeros((n, nb)))
        return cls(t=np.zeros(n), sg_names=tuple(sg_names), gfm_names=tuple(gfm_names),
                   bus_ids=tuple(bus_ids), coi_omega=np.zeros(n), **arrays, **kw)

    @property
    def coi_hz(self):
        return ctl.rad_to_hz(self.coi_omega)


def coi_frequency(omega, M, in_service=None):
    """Inertia-weighted mean generator frequency (rad/s)."""
    omega = np.asarray(omega, dtype=float)
    M = np.asarray(M, dtype=float)
    mask = np.ones(omega.shape, bool) if in_service is None else np.asarray(in_service, bool)
    if not mask.any():
        raise MetricError("centre-of-inertia frequency needs at least one in-service generator")
    return float(np.sum(M[mask] * omega[mask]) / np.sum(M[mask]))


def max_deviation_map(log: TrajectoryLog):
    """Per-bus maximum of ``|f − f0|`` over the run, in Hz, ordered as ``log.bus_ids``."""
    if log.bus_omega.shape[0] == 0:
        return np.zeros(len(log.bus_ids))
    return ctl.rad_to_hz(np.max(np.abs(log.bus_omega - log.omega0), axis=0))


class Simulator:
    """Owns the configuration of one run and advances :class:`SystemState`."""

    def __init__(self, model: GridModel, sgs, gfms, cfg: ctl.ControlConfig,
                 schedule: ScheduleConfig | None = None, graph: ctl.CommGraph | None = None):
        self.cfg = cfg
        self.schedule = schedule or ScheduleConfig.from_control(cfg)
        if (abs(self.schedule.safety_period - cfg.safety_period) > 1e-12
                or abs(self.schedule.consensus_period - cfg.consensus_period) > 1e-12):
            raise ConfigError("schedule periods disagree with the control configuration")
        self.sgs = list(sgs)
        self.gfms = list(gfms)
        self.graph = graph if graph is not None else ctl.CommGraph.ring(len(self.gfms))
        if self.gfms and len(self.graph) != len(self.gfms):
            raise ConfigError("communication graph size does not match the storage units")
        couplings = [DeviceCoupling(u.name, u.bus, u.params.x_d, "sg") for u in self.sgs]
        couplings += [DeviceCoupling(u.name, u.bus, u.params.x_c, "gfm") for u in self.gfms]
        self.model = dataclasses.replace(model, couplings=tuple(couplings))
        self.model.check_topology()
        self.events = sorted(self.schedule.events, key=lambda e: e.time)
        self.ns, self.ng = len(self.sgs), len(self.gfms)
        self.n = self.model.n_phys
        self.gfm_term = np.array([self.model.index[u.bus] for u in self.gfms], dtype=np.int64)
        self._pv = np.empty(0, dtype=np.int64)
        self._pq = np.arange(self.n, dtype=np.int64)
        self._zeros_int = np.zeros(self.ns + self.ng, dtype=complex)
        self._refresh_params()
        self._bind_model(self.model)

    # ------------------------------------------------------------------ setup
    def _refresh_params(self):
        self.sp = sg_param_arrays(self.sgs)
        self.gp = gfm_param_arrays(self.gfms)
        self._sgp = np.ascontiguousarray(np.array([self.sp[f] for f in _SG_ROWS]).reshape(len(_SG_ROWS), self.ns))
        self._gp = np.ascontiguousarray(np.array([self.gp[f] for f in _GFM_ROWS]).reshape(len(_GFM_ROWS), self.ng))

    def _bind_model(self, model: GridModel):
        self.Y = np.ascontiguousarray(model.ybus)
        self.Sbus = np.concatenate([-model.loads, self._zeros_int])
        self.sg_on = np.array([cp.in_service for cp in model.couplings[:self.ns]], dtype=bool)

    def initialize(self) -> SystemState:
        """Pre-disturbance equilibrium with dormant storage (zero set-points and
        zero injection).  Updates generator EMFs, governor references and storage
        voltage set-points in place."""
        if not self.sgs:
            raise InitializationError("at least one synchronous generator is required")
        model, n = self.model, self.n
        slack = [k for k, u in enumerate(self.sgs) if u.dispatch is None]
        if len(slack) > 1:
            raise InitializationError(f"more than one slack generator: {[self.sgs[k].name for k in slack]}")
        slack = slack[0] if slack else 0
        ref = model.index[self.sgs[slack].bus]
        pv = [model.index[u.bus] for k, u in enumerate(self.sgs) if k != slack]
        pq = [i for i in range(n) if i != ref and i not in pv]
        V0 = np.ones(n, dtype=complex)
        Sbus = -model.loads.astype(complex)
        for k, u in enumerate(self.sgs):
            i = model.index[u.bus]
            V0[i] = u.v_set
            if k != slack:
                Sbus[i] += u.dispatch
        Yp = assemble_ybus(model.buses, model.branches)
        try:
            Vp, _, _ = newton_power_flow(Yp, V0, Sbus, pv, pq)
        except SolverError as exc:
            raise InitializationError(f"pre-disturbance power flow failed: {exc}") from exc
        S_bus = Vp * np.conj(Yp @ Vp) + model.loads
        sgs = []
        E_int = np.zeros(self.ns + self.ng, dtype=complex)
        for k, u in enumerate(self.sgs):
            i = model.index[u.bus]
            current = np.conj(S_bus[i] / Vp[i])
            E_int[k] = Vp[i] + 1j * u.params.x_d * current
        for k, u in enumerate(self.gfms):
            E_int[self.ns + k] = Vp[model.index[u.bus]]
        V = np.concatenate([Vp, E_int[: self.ns + self.ng]])
        V, _, F = self._solve(V, E_int)
        S_int = V[n:] * np.conj(self.Y[n:] @ V)
        for k, u in enumerate(self.sgs):
            p = dataclasses.replace(u.params, E=float(abs(E_int[k])), P_ref=float(S_int[k].real))
            sgs.append(dataclasses.replace(u, params=p))
        gfms = []
        for k, u in enumerate(self.gfms):
            p = dataclasses.replace(u.params, V_set=float(abs(V[self.gfm_term[k]])), Q_set=0.0)
            gfms.append(dataclasses.replace(u, params=p))
        self.sgs, self.gfms = sgs, gfms
        self._refresh_params()

        w0 = self.cfg.omega0
        ns, ng = self.ns, self.ng
        x = np.concatenate([np.angle(E_int[:ns]), np.full(ns, w0), self.sp["P_ref"].copy(),
                            np.angle(E_int[ns:]), np.full(ng, w0), np.zeros(ng),
                            np.abs(E_int[ns:])])
        state = SystemState(step=0, t=0.0, x=x, V=V, p_con=np.zeros(ng), p_set=np.zeros(ng),
                            p_low=np.zeros(ng), p_up=np.zeros(ng), bus_omega=np.full(n, w0),
                            model=self.model)
        dx, _, _ = self.derivatives(state.x, state.p_set, state.V)
        worst = float(np.max(np.abs(dx), initial=0.0))
        if worst > EQUILIBRIUM_TOL:
            raise InitializationError(f"initial state is not an equilibrium: max derivative {worst:.3e}")
        p_gfm = S_int[ns:].real
        if ng and np.max(np.abs(p_gfm)) > 1e-8:
            raise InitializationError(f"storage injection at t=0 is {np.max(np.abs(p_gfm)):.3e}, expected 0")
        self._measure(state)
        return state

    # ------------------------------------------------------------ network/rhs
    def _solve(self, V, E_int):
        V = V.copy()
        V[self.n:] = E_int
        V, it, F, ok = _newton_kernel(self.Y, V, self.Sbus, self._pv, self._pq,
                                      NEWTON_TOL, NEWTON_MAX_ITER)
        if not ok or not np.all(np.isfinite(V)):
            raise SolverError(f"network solve did not converge (max mismatch {np.max(np.abs(F)):.3e})",
                              mismatch=F.copy())
        return V, it, F

    def _kernel_args(self):
        return (self.Y, self.Sbus, self._pq, self._sgp, self.sg_on, self._gp, self.gfm_term,
                self.ns, self.ng, self.cfg.omega0)

    def _internal(self, x):
        ns, ng = self.ns, self.ng
        E = np.empty(ns + ng, dtype=complex)
        E[:ns] = self.sp["E"] * np.exp(1j * x[:ns])
        o = 3 * ns
        E[ns:] = x[o + 3 * ng: o + 4 * ng] * np.exp(1j * x[o: o + ng])
        return E

    def derivatives(self, x, p_set, V_guess):
        """State derivative at ``x`` plus the network solution and the complex
        internal-bus injections."""
        dx, V, S_int, ok, F = _rhs_kernel(np.asarray(x, dtype=float), np.asarray(p_set, dtype=float),
                                          V_guess, *self._kernel_args())
        if not ok:
            raise SolverError(f"network solve did not converge (max mismatch {np.max(np.abs(F)):.3e})",
                              mismatch=F.copy())
        return dx, V, S_int

    def _measure(self, state):
        S_int = state.V[self.n:] * np.conj(self.Y[self.n:] @ state.V)
        state.S_int = S_int
        return S_int

    # ---------------------------------------------------------------- control
    def control(self, state: SystemState):
        """Run whatever control layers tick at ``state.step``."""
        k, cfg, ng = state.step, self.cfg, self.ng
        if not ng:
            return
        S_int = state.S_int
        P, Q = S_int.real[self.ns:], S_int.imag[self.ns:]
        o = 3 * self.ns
        omega = state.x[o + ng:o + 2 * ng]
        m_p, S = self.gp["m_p"], self.gp["S"]
        if cfg.mode != "no-secondary" and k % self.schedule.consensus_every == 0:
            state.p_con = ctl.capacity_clamp(ctl.consensus_round(state.p_con, omega, m_p, self.graph, cfg),
                                             Q, S)
            if cfg.mode == "consensus":
                state.p_set = ctl.capacity_clamp(state.p_con, Q, S)
        if k % self.schedule.safety_every == 0:
            bounds = ctl.safety_bounds(omega, P, m_p, cfg)
            state.p_low, state.p_up = bounds.P_low, bounds.P_up
            if cfg.mode == "safety-consensus":
                state.p_set = ctl.capacity_clamp(ctl.compose_safety_consensus(state.p_con, bounds), Q, S)

    # ----------------------------------------------------------------- events
    def fire_events(self, state: SystemState):
        """Apply scenario events due at or before ``state.t``; returns descriptions."""
        fired = []
        eps = 1e-9 * self.schedule.step
        while state.fired < len(self.events) and self.events[state.fired].time <= state.t + eps:
            ev = self.events[state.fired]
            state.model = apply_topology_event(state.model, ev)
            state.fired += 1
            fired.append((state.t, f"{ev.kind} {ev.target} {ev.magnitude:g}".rstrip()))
        if fired:
            self._bind_model(state.model)
            state.V, _, _ = self._solve(state.V, self._internal(state.x))
            self._measure(state)
        return fired

    # -------------------------------------------------------------- integrate
    def advance(self, state: SystemState):
        """One RK4 step with set-points held; updates the bus frequency filter."""
        h = self.schedule.step
        x_new, V_new, S_new, ok, F = _rk4_kernel(state.x, state.p_set, state.V, h, *self._kernel_args())
        if not ok:
            raise SolverError(f"network solve did not converge (max mismatch {np.max(np.abs(F)):.3e})",
                              mismatch=F.copy())
        n = self.n
        dth = np.angle(V_new[:n] / state.V[:n])
        raw = self.cfg.omega0 + dth / h
        a = h / (self.schedule.safety_period + h)
        state.bus_omega = state.bus_omega + a * (raw - state.bus_omega)
        state.x, state.V, state.S_int = x_new, V_new, S_new
        state.step += 1
        state.t = state.step * h
        self._check_band(state)
        return state

    def _check_band(self, state):
        if not np.all(np.isfinite(state.x)):
            raise SimulationAbort(f"non-finite state at t={state.t:.4f} s")
        band = ctl.hz_to_rad(self.schedule.abort_band_hz)
        ns, ng = self.ns, self.ng
        w = np.concatenate([state.x[ns:2 * ns][self.sg_on], state.x[3 * ns + ng:3 * ns + 2 * ng]])
        dev = np.abs(w - self.cfg.omega0)
        if dev.size and dev.max() > band:
            raise SimulationAbort(f"frequency deviation {ctl.rad_to_hz(dev.max()):.3f} Hz exceeds "
                                  f"the {self.schedule.abort_band_hz:g} Hz abort band at t={state.t:.4f} s")

    def step(self, state: SystemState) -> SystemState:
        """Control ticks, due events, then one integration step (in place)."""
        self.control(state)
        self.fire_events(state)
        return self.advance(state)

    # -------------------------------------------------------------------- run
    def coi(self, state):
        return coi_frequency(state.x[self.ns:2 * self.ns], self.sp["M"], self.sg_on)

    def _record(self, lg: TrajectoryLog, k, state):
        ns, ng, n = self.ns, self.ng, self.n
        x = state.x
        o = 3 * ns
        lg.t[k] = state.t
        lg.sg_theta[k], lg.sg_omega[k], lg.sg_pm[k] = x[:ns], x[ns:2 * ns], x[2 * ns:o]
        lg.sg_p[k] = state.S_int.real[:ns]
        lg.gfm_theta[k], lg.gfm_omega[k] = x[o:o + ng], x[o + ng:o + 2 * ng]
        lg.gfm_ve[k], lg.gfm_e[k] = x[o + 2 * ng:o + 3 * ng], x[o + 3 * ng:o + 4 * ng]
        lg.p_con[k], lg.p_low[k], lg.p_up[k], lg.p_set[k] = state.p_con, state.p_low, state.p_up, state.p_set
        lg.p_inj[k], lg.q_inj[k] = state.S_int.real[ns:], state.S_int.imag[ns:]
        lg.bus_v[k] = np.abs(state.V[:n])
        lg.bus_omega[k] = state.bus_omega
        lg.coi_omega[k] = self.coi(state)

    def run(self, state: SystemState | None = None) -> TrajectoryLog:
        state = state or self.initialize()
        n_steps = self.schedule.n_steps
        lg = TrajectoryLog.allocate(n_steps + 1, [u.name for u in self.sgs], [u.name for u in self.gfms],
                                    [b.id for b in self.model.buses], mode=self.cfg.mode,
                                    omega0=self.cfg.omega0, m_p=self.gp["m_p"].copy())
        k = 0
        try:
            for k in range(n_steps + 1):
                self.control(state)
                self._record(lg, k, state)
                if k == n_steps:
                    break
                lg.events.extend(self.fire_events(state))
                self.advance(state)
        except SafegridError as exc:
            exc.time = state.t
            exc.args = (f"at t={state.t:.4f} s: {exc.args[0] if exc.args else exc}",) + exc.args[1:]
            raise
        self.final_state = state
        return lg


def run_scenario(model, sgs, gfms, control_cfg, schedule, scenario=(), graph=None) -> TrajectoryLog:
    """Initialise, then run ``scenario`` (a sequence of events) to the end time."""
    events = tuple(getattr(scenario, "events", scenario))
    schedule = dataclasses.replace(schedule, events=events)
    return Simulator(model, sgs, gfms, control_cfg, schedule, graph).run()
