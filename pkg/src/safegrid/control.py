"""Set-point pipeline for grid-forming storage.

Per unit and per tick: distributed consensus update, barrier-derived safety
bounds, min/max composition of the two, then the capacity clamp.  All functions
accept scalars or numpy arrays unless noted otherwise.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

log = logging.getLogger(__name__)

MODES = ("no-secondary", "consensus", "safety-consensus")


def hz_to_rad(f):
    return 2.0 * math.pi * f


def rad_to_hz(w):
    return w / (2.0 * math.pi)


@dataclass(frozen=True)
class ControlConfig:
    """Gains, limits (rad/s) and layer periods (s).

    Build from Hz limits with :meth:`from_hz`.
    """

    zeta1: float = 2.0
    zeta2: float = 0.05
    alpha_bar: float = 5e6
    p: int = 3
    omega_min: float = hz_to_rad(59.5)
    omega_max: float = hz_to_rad(60.5)
    omega0: float = hz_to_rad(60.0)
    consensus_period: float = 4.0
    safety_period: float = 0.05
    mode: str = "safety-consensus"

    def __post_init__(self):
        errors = self.problems()
        if errors:
            raise ConfigError("; ".join(errors))

    def problems(self):
        errors = []
        if not self.zeta1 > 0 or not self.zeta2 > 0:
            errors.append("consensus gains zeta1, zeta2 must be positive")
        if not self.alpha_bar > 0:
            errors.append("barrier gain alpha_bar must be positive")
        if int(self.p) != self.p or self.p < 1 or self.p % 2 != 1:
            errors.append("barrier exponent p must be an odd positive integer")
        if not self.omega_min < self.omega0 < self.omega_max:
            errors.append("frequency limits must bracket the nominal frequency")
        if not 0 < self.safety_period <= self.consensus_period:
            errors.append("safety period must be positive and not exceed the consensus period")
        if self.mode not in MODES:
            errors.append(f"unknown control mode {self.mode!r}; expected one of {MODES}")
        return errors

    @classmethod
    def from_hz(cls, f_min=59.5, f_max=60.5, f_nominal=60.0, **kw):
        return cls(omega_min=hz_to_rad(f_min), omega_max=hz_to_rad(f_max),
                   omega0=hz_to_rad(f_nominal), **kw)

    @property
    def delta_omega(self) -> float:
        """Half-width of the safe band; the narrower side if asymmetric."""
        return min(self.omega0 - self.omega_min, self.omega_max - self.omega0)

    @property
    def symmetric(self) -> bool:
        return math.isclose(self.omega0 - self.omega_min, self.omega_max - self.omega0,
                            rel_tol=1e-12, abs_tol=1e-12)


@dataclass(frozen=True)
class CommGraph:
    """Undirected neighbour sets over the storage units, by unit index."""

    adjacency: tuple

    def __post_init__(self):
        adj = tuple(frozenset(int(j) for j in nbrs) for nbrs in self.adjacency)
        object.__setattr__(self, "adjacency", adj)
        n = len(adj)
        for i, nbrs in enumerate(adj):
            if i in nbrs:
                raise ConfigError(f"communication graph has a self-loop at unit {i}")
            for j in nbrs:
                if not 0 <= j < n:
                    raise ConfigError(f"unit {i} lists unknown neighbour {j}")
                if i not in adj[j]:
                    raise ConfigError(f"communication link {i}-{j} is not symmetric")
        if n > 1:
            seen, todo = {0}, [0]
            while todo:
                for j in adj[todo.pop()]:
                    if j not in seen:
                        seen.add(j)
                        todo.append(j)
            if len(seen) != n:
                lonely = sorted(set(range(n)) - seen)
                raise ConfigError(f"communication graph is not connected; unreachable units {lonely}")

    @classmethod
    def ring(cls, n):
        if n == 1:
            return cls(((),))
        if n == 2:
            return cls(({1}, {0}))
        return cls(tuple({(i - 1) % n, (i + 1) % n} for i in range(n)))

    @classmethod
    def from_edges(cls, n, edges):
        adj = [set() for _ in range(n)]
        for i, j in edges:
            adj[i].add(j)
            adj[j].add(i)
        return cls(tuple(adj))

    @property
    def edges(self):
        return sorted((i, j) for i, nbrs in enumerate(self.adjacency) for j in nbrs if i < j)

    def __len__(self):
        return len(self.adjacency)


@dataclass(frozen=True)
class SetpointBounds:
    P_low: float | np.ndarray
    P_up: float | np.ndarray


def consensus_update(P_set_i, omega_i, m_p_i, neighbor_setpoints, cfg: ControlConfig):
    """One consensus step for a single unit.

    ``neighbor_setpoints`` is a sequence of ``(m_p_j, P_set_j)`` as published at
    the previous tick.
    """
    mismatch = sum(m_p_i * P_set_i - m_p_j * P_j for m_p_j, P_j in neighbor_setpoints)
    return P_set_i - cfg.zeta1 * (omega_i - cfg.omega0) - cfg.zeta2 * mismatch


def consensus_round(P_set, omega, m_p, graph: CommGraph, cfg: ControlConfig):
    """Synchronous round: every unit reads its neighbours' previous values."""
    P_set = np.asarray(P_set, dtype=float)
    omega = np.asarray(omega, dtype=float)
    m_p = np.asarray(m_p, dtype=float)
    if len(graph) != P_set.shape[0]:
        raise ConfigError(f"communication graph has {len(graph)} units, expected {P_set.shape[0]}")
    if P_set.shape[0] > 1 and any(not nbrs for nbrs in graph.adjacency):
        raise ConfigError("a storage unit has no consensus neighbours")
    out = np.empty_like(P_set)
    for i, nbrs in enumerate(graph.adjacency):
        out[i] = consensus_update(P_set[i], omega[i], m_p[i],
                                  [(m_p[j], P_set[j]) for j in sorted(nbrs)], cfg)
    return out


def barrier_values(omega, cfg: ControlConfig):
    """``(h_min, h_max)``: both nonnegative exactly inside the safe band."""
    return omega - cfg.omega_min, cfg.omega_max - omega


def _droop(params):
    return getattr(params, "m_p", params)


def safety_bounds(omega_i, P_i, params, cfg: ControlConfig) -> SetpointBounds:
    """Set-point interval keeping the barrier derivative conditions satisfied.

    ``params`` is a :class:`~safegrid.devices.GfmParams` or the droop gain
    ``m_p`` itself (scalar or array).
    """
    m_p = _droop(params)
    base = P_i + (omega_i - cfg.omega0) / m_p
    return SetpointBounds(P_low=base - cfg.alpha_bar * (omega_i - cfg.omega_min) ** cfg.p,
                          P_up=base - cfg.alpha_bar * (omega_i - cfg.omega_max) ** cfg.p)


def compose_safety_consensus(P_con, bounds: SetpointBounds):
    """Clamp the consensus set-point into the closed safety interval."""
    assert np.all(bounds.P_low < bounds.P_up), "inverted safety bounds"
    return np.minimum(bounds.P_up, np.maximum(bounds.P_low, P_con))


def capacity_clamp(P_hat, Q, S):
    """Clamp the active set-point to ``±sqrt(S² − Q²)``.

    If the reactive loading alone exceeds the rating the set-point becomes zero
    and a warning is logged.
    """
    Q = np.asarray(Q, dtype=float)
    S = np.asarray(S, dtype=float)
    over = np.abs(Q) > S
    if np.any(over):
        log.warning("reactive output exceeds rating on %d unit(s); active set-point forced to zero",
                    int(np.sum(over)))
    P_max = np.sqrt(np.maximum(S * S - Q * Q, 0.0))
    out = np.minimum(P_max, np.maximum(-P_max, P_hat))
    out = np.where(over, 0.0, out)
    return out if out.ndim else float(out)


def barrier_gain(m_p, tau, cfg: ControlConfig):
    """Recover the barrier rate gain from ``alpha_bar = tau*alpha/m_p``."""
    return cfg.alpha_bar * m_p / tau


def delta_margin(params, cfg: ControlConfig):
    """Margin beyond the band edge used in the safety guarantee,
    ``(2Δω / (α m_p))^(1/p)`` with ``α`` recovered via :func:`barrier_gain`.
    ``params`` needs ``m_p`` and ``tau``."""
    m_p = params.m_p
    alpha = barrier_gain(m_p, params.tau, cfg)
    return (2.0 * cfg.delta_omega / (alpha * m_p)) ** (1.0 / cfg.p)


def override_margin(params, cfg: ControlConfig):
    """Margin ``(2Δω / (alpha_bar m_p))^(1/p)`` past which the held bound is
    guaranteed to override any admissible consensus set-point.

    Beyond ``band edge + override_margin`` the barrier term alone exceeds
    ``2Δω/m_p``, which is what pushes the bound past the consensus interval.
    """
    return (2.0 * cfg.delta_omega / (cfg.alpha_bar * _droop(params))) ** (1.0 / cfg.p)


@dataclass(frozen=True)
class Theorem1Report:
    droop_ok: bool
    droop_slack: float            # Δω/S − m_p
    setpoint_bound: float         # S − δ/m_p, bound on |P_con|
    setpoint_bound_ok: bool
    disturbance_upper: float      # Δω/m_p − S
    disturbance_ok: bool
    delta: float
    symmetric_limits: bool

    @property
    def ok(self) -> bool:
        return self.droop_ok and self.setpoint_bound_ok and self.disturbance_ok

    def lines(self, label=""):
        tag = f"{label}: " if label else ""
        out = [
            f"{tag}droop m_p < dw/S: {'ok' if self.droop_ok else 'VIOLATED'} (slack {self.droop_slack:.6g})",
            f"{tag}consensus bound S - delta/m_p = {self.setpoint_bound:.6g} "
            f"({'ok' if self.setpoint_bound_ok else 'VIOLATED: empty'})",
            f"{tag}disturbance interval (0, {self.disturbance_upper:.6g}) "
            f"{'ok' if self.disturbance_ok else 'VIOLATED'}",
        ]
        if not self.symmetric_limits:
            out.append(f"{tag}limits are asymmetric; the narrower half-band was used")
        return out


def theorem1_preconditions(params, cfg: ControlConfig, delta_P=None) -> Theorem1Report:
    """Check the sufficient conditions of the safety-consensus guarantee for one
    unit; ``params`` needs ``m_p``, ``tau`` and ``S``.  Without ``delta_P`` only
    non-emptiness of the admissible disturbance interval is checked."""
    dw = cfg.delta_omega
    delta = delta_margin(params, cfg)
    upper = dw / params.m_p - params.S
    bound = params.S - delta / params.m_p
    if delta_P is None:
        dist_ok = upper > 0
    else:
        dist_ok = 0 < delta_P < upper
    return Theorem1Report(droop_ok=params.m_p < dw / params.S, droop_slack=dw / params.S - params.m_p,
                          setpoint_bound=bound, setpoint_bound_ok=bound > 0,
                          disturbance_upper=upper, disturbance_ok=dist_ok, delta=delta,
                          symmetric_limits=cfg.symmetric)
