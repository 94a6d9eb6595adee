"""Static network description, bus admittance matrix and algebraic network solve.

Buses come in two groups.  The physical buses (``load`` or ``passive``) are the
unknowns of the network solve.  Every device adds one internal bus, placed after
the physical buses in device order, connected to its terminal bus through a
coupling reactance and held at a fixed voltage ``E∠θ`` during a solve.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numba as nb
import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .errors import EventError, SolverError, TopologyError

BUS_KINDS = ("load", "passive", "sg-internal", "gfm-internal")
EVENT_KINDS = ("load_step", "gen_trip", "branch_trip")

NEWTON_TOL = 1e-8
NEWTON_MAX_ITER = 20


@dataclass(frozen=True)
class Bus:
    id: int
    kind: str = "passive"
    voltage_magnitude: float = 1.0
    voltage_angle: float = 0.0
    load_active: float = 0.0
    load_reactive: float = 0.0


@dataclass(frozen=True)
class Branch:
    """Series branch ``r + jx`` with optional total line charging."""

    from_bus: int
    to_bus: int
    r: float = 0.0
    x: float = 0.1
    charging: float = 0.0
    in_service: bool = True
    name: str = ""

    @property
    def admittance(self) -> complex:
        return 1.0 / complex(self.r, self.x)

    @property
    def conductance(self) -> float:
        return self.admittance.real

    @property
    def susceptance(self) -> float:
        return self.admittance.imag


@dataclass(frozen=True)
class DeviceCoupling:
    """Internal device bus tied to ``bus`` through reactance ``reactance``."""

    name: str
    bus: int
    reactance: float
    kind: str = "sg"
    in_service: bool = True


@dataclass(frozen=True)
class Event:
    """A timed disturbance.

    ``magnitude`` is a fraction of the base total load when ``unit`` is
    ``"fraction"`` and an absolute p.u. value when it is ``"pu"``.  ``reactive``
    optionally steps the reactive load in the same unit.
    """

    time: float
    kind: str
    target: int | str
    magnitude: float = 0.0
    unit: str = "fraction"
    reactive: float | None = None


def assemble_ybus(buses: Sequence[Bus], branches: Sequence[Branch],
                  device_couplings: Sequence[DeviceCoupling] = ()) -> np.ndarray:
    """Dense complex bus admittance matrix over physical then internal buses."""
    index = {b.id: k for k, b in enumerate(buses)}
    n = len(buses) + len(device_couplings)
    Y = np.zeros((n, n), dtype=complex)
    for br in branches:
        if not br.in_service:
            continue
        i, k = index[br.from_bus], index[br.to_bus]
        y = br.admittance
        Y[i, i] += y + 0.5j * br.charging
        Y[k, k] += y + 0.5j * br.charging
        Y[i, k] -= y
        Y[k, i] -= y
    for d, cp in enumerate(device_couplings):
        if not cp.in_service:
            continue
        if cp.reactance <= 0:
            raise ValueError(f"coupling reactance of {cp.name} must be positive")
        i, k = index[cp.bus], len(buses) + d
        y = 1.0 / complex(0.0, cp.reactance)
        Y[i, i] += y
        Y[k, k] += y
        Y[i, k] -= y
        Y[k, i] -= y
    return Y


def power_injection(V, theta, Y, i):
    """Active and reactive injection at bus ``i`` as the explicit double sum."""
    V = np.asarray(V, dtype=float)
    theta = np.asarray(theta, dtype=float)
    G, B = Y.real[i], Y.imag[i]
    dth = theta[i] - theta
    P = V[i] * np.sum(V * (G * np.cos(dth) + B * np.sin(dth)))
    Q = V[i] * np.sum(V * (G * np.sin(dth) - B * np.cos(dth)))
    return float(P), float(Q)


def injections(V, theta, Y):
    """Vectorised (P, Q) at every bus; same quantity as :func:`power_injection`."""
    Vc = np.asarray(V) * np.exp(1j * np.asarray(theta))
    S = Vc * np.conj(Y @ Vc)
    return S.real, S.imag


@nb.njit(cache=True)
def _newton_kernel(Y, V, Sbus, pv, pq, tol, max_iter):
    n = V.shape[0]
    npv, npq = pv.shape[0], pq.shape[0]
    pvpq = np.empty(npv + npq, dtype=np.int64)
    pvpq[:npv] = pv
    pvpq[npv:] = pq
    m1 = npv + npq
    m = m1 + npq
    Va = np.angle(V)
    Vm = np.abs(V)
    F = np.empty(m)
    J = np.empty((m, m))
    it = 0
    while True:
        I = Y @ V
        S = V * np.conj(I)
        for a in range(m1):
            F[a] = (S[pvpq[a]] - Sbus[pvpq[a]]).real
        for a in range(npq):
            F[m1 + a] = (S[pq[a]] - Sbus[pq[a]]).imag
        norm = 0.0
        for a in range(m):
            if abs(F[a]) > norm:
                norm = abs(F[a])
        if norm <= tol:
            return V, it, F, True
        if it >= max_iter:
            return V, it, F, False
        Vn = V / Vm
        # dS/dVa[i,k] = j V_i conj(delta_ik I_i - Y_ik V_k)
        # dS/dVm[i,k] = V_i conj(Y_ik Vn_k) + delta_ik conj(I_i) Vn_k
        for a in range(m):
            i = pvpq[a] if a < m1 else pq[a - m1]
            for b in range(m):
                if b < m1:
                    k = pvpq[b]
                    d = -Y[i, k] * V[k]
                    if i == k:
                        d += I[i]
                    val = 1j * V[i] * np.conj(d)
                else:
                    k = pq[b - m1]
                    val = V[i] * np.conj(Y[i, k] * Vn[k])
                    if i == k:
                        val += np.conj(I[i]) * Vn[k]
                J[a, b] = val.real if a < m1 else val.imag
        dx = np.linalg.solve(J, -F)
        for a in range(m1):
            Va[pvpq[a]] += dx[a]
        for a in range(npq):
            Vm[pq[a]] += dx[m1 + a]
        V = Vm * np.exp(1j * Va)
        it += 1


def newton_power_flow(Y, V0, Sbus, pv, pq, tol=NEWTON_TOL, max_iter=NEWTON_MAX_ITER):
    """Polar Newton-Raphson on buses ``pv`` (angle unknown) and ``pq`` (angle and
    magnitude unknown); every other bus is a fixed reference.

    Returns ``(V, iterations, mismatch)``.  Raises :class:`SolverError` carrying
    the final mismatch vector when ``max_iter`` updates are not enough.
    """
    V, it, F, ok = _newton_kernel(np.ascontiguousarray(Y, dtype=np.complex128),
                                  np.array(V0, dtype=np.complex128),
                                  np.asarray(Sbus, dtype=np.complex128),
                                  np.asarray(pv, dtype=np.int64),
                                  np.asarray(pq, dtype=np.int64),
                                  float(tol), int(max_iter))
    if not ok or not np.all(np.isfinite(V)):
        raise SolverError(f"Newton solve did not converge in {max_iter} iterations "
                          f"(max mismatch {np.max(np.abs(F)):.3e})", mismatch=F.copy())
    return V, it, F


@dataclass(frozen=True)
class NetworkSolution:
    V: np.ndarray          # complex voltage at every bus, physical then internal
    iterations: int
    max_mismatch: float

    @property
    def vm(self):
        return np.abs(self.V)

    @property
    def va(self):
        return np.angle(self.V)

    def injections(self, Y):
        S = self.V * np.conj(Y @ self.V)
        return S.real, S.imag


def solve_network(internal_voltages, loads, Y, v0=None, tol=NEWTON_TOL,
                  max_iter=NEWTON_MAX_ITER) -> NetworkSolution:
    """Solve the constant-power load buses with device internal buses fixed.

    ``internal_voltages`` are the complex device EMFs, ``loads`` the complex
    demands ``P + jQ`` at the physical buses and ``v0`` an optional warm start
    for the physical bus voltages (flat start at the first source angle
    otherwise).
    """
    E = np.asarray(internal_voltages, dtype=complex)
    S_load = np.asarray(loads, dtype=complex)
    n_phys = S_load.shape[0]
    if v0 is None:
        live = np.flatnonzero(np.abs(np.diag(Y)[n_phys:]) > 0)
        ang = np.angle(E[live[0]]) if live.size else 0.0
        v0 = np.full(n_phys, np.exp(1j * ang))
    V = np.concatenate([np.asarray(v0, dtype=complex), E])
    Sbus = np.concatenate([-S_load, np.zeros(E.shape[0], dtype=complex)])
    V, it, F = newton_power_flow(Y, V, Sbus, np.empty(0, np.int64), np.arange(n_phys), tol, max_iter)
    return NetworkSolution(V=V, iterations=it, max_mismatch=float(np.max(np.abs(F), initial=0.0)))


@dataclass(frozen=True)
class GridModel:
    """Immutable network: physical buses, branches and device couplings.

    ``base_total_load`` is the pre-disturbance total active load; load steps
    given as fractions of total load refer to it.
    """

    buses: tuple
    branches: tuple
    couplings: tuple = ()
    base_total_load: float = field(default=None)

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "branches", tuple(self.branches))
        object.__setattr__(self, "couplings", tuple(self.couplings))
        if self.base_total_load is None:
            object.__setattr__(self, "base_total_load", self.total_load)

    @cached_property
    def index(self) -> dict:
        return {b.id: k for k, b in enumerate(self.buses)}

    @property
    def n_phys(self) -> int:
        return len(self.buses)

    @property
    def total_load(self) -> float:
        return float(sum(b.load_active for b in self.buses))

    @cached_property
    def ybus(self) -> np.ndarray:
        return assemble_ybus(self.buses, self.branches, self.couplings)

    @property
    def loads(self) -> np.ndarray:
        return np.array([complex(b.load_active, b.load_reactive) for b in self.buses])

    @property
    def internal_buses(self) -> tuple:
        return tuple(Bus(id=-(k + 1), kind=f"{cp.kind}-internal")
                     for k, cp in enumerate(self.couplings))

    def coupling_index(self, name: str) -> int:
        for k, cp in enumerate(self.couplings):
            if cp.name == name:
                return k
        raise KeyError(name)

    def check_topology(self):
        """Raise :class:`TopologyError` if sourceless or islanded."""
        live = [k for k, cp in enumerate(self.couplings) if cp.in_service]
        if self.couplings and not live:
            raise TopologyError("network has no in-service voltage source")
        n = self.n_phys
        rows, cols = [], []
        for br in self.branches:
            if br.in_service:
                rows.append(self.index[br.from_bus])
                cols.append(self.index[br.to_bus])
        nodes = list(range(n))
        for k in live:
            rows.append(self.index[self.couplings[k].bus])
            cols.append(n + k)
            nodes.append(n + k)
        m = n + len(self.couplings)
        graph = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(m, m))
        _, labels = connected_components(graph, directed=False)
        labels = labels[nodes]
        main = np.bincount(labels).argmax()
        islanded = [self._bus_label(nodes[a]) for a in range(len(nodes)) if labels[a] != main]
        if islanded:
            raise TopologyError(f"network is islanded; cut-off buses: {islanded}", islanded)

    def _bus_label(self, k):
        return self.buses[k].id if k < self.n_phys else self.couplings[k - self.n_phys].name


def apply_topology_event(model: GridModel, event: Event) -> GridModel:
    """Return the model after ``event``; the input model is left untouched."""
    if event.kind == "load_step":
        if event.target not in model.index:
            raise EventError(f"load step targets unknown bus {event.target!r}")
        k = model.index[event.target]
        bus = model.buses[k]
        if bus.kind != "load":
            raise EventError(f"load step targets bus {bus.id}, which is not a load bus")
        scale = model.base_total_load if event.unit == "fraction" else 1.0
        dq = 0.0 if event.reactive is None else event.reactive * scale
        new_bus = dataclasses.replace(bus, load_active=bus.load_active + event.magnitude * scale,
                                      load_reactive=bus.load_reactive + dq)
        buses = model.buses[:k] + (new_bus,) + model.buses[k + 1:]
        return dataclasses.replace(model, buses=buses)
    if event.kind == "gen_trip":
        try:
            k = model.coupling_index(event.target)
        except KeyError:
            raise EventError(f"generator trip targets unknown device {event.target!r}") from None
        cp = model.couplings[k]
        if cp.kind != "sg":
            raise EventError(f"generator trip targets {cp.name}, which is not a synchronous generator")
        if not cp.in_service:
            raise EventError(f"generator {cp.name} is already tripped")
        couplings = list(model.couplings)
        couplings[k] = dataclasses.replace(cp, in_service=False)
        new = dataclasses.replace(model, couplings=tuple(couplings))
        new.check_topology()
        return new
    if event.kind == "branch_trip":
        hits = [k for k, br in enumerate(model.branches) if br.name == event.target]
        if not hits:
            raise EventError(f"branch trip targets unknown branch {event.target!r}")
        k = hits[0]
        if not model.branches[k].in_service:
            raise EventError(f"branch {event.target} is already out of service")
        branches = list(model.branches)
        branches[k] = dataclasses.replace(branches[k], in_service=False)
        new = dataclasses.replace(model, branches=tuple(branches))
        new.check_topology()
        return new
    raise EventError(f"unknown event kind {event.kind!r}")
