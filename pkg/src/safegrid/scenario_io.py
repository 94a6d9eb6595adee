"""Reading system and scenario files, writing run results.

Both input files are TOML.  A system file holds ``[[bus]]``, ``[[branch]]``,
``[[generator]]`` and ``[[storage]]`` tables plus optional ``[control]`` and
``[communication]`` sections; a scenario file holds ``[[event]]`` tables.
Frequencies in files are in Hz; everything is converted to rad/s on load.
"""
from __future__ import annotations

import dataclasses
import io
import logging
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import tomli
import tomli_w

from . import control as ctl
from .devices import GfmParams, GfmUnit, SgParams, SgUnit
from .errors import ConfigError, SafegridError, TopologyError, ValidationError
from .netmodel import BUS_KINDS, EVENT_KINDS, Branch, Bus, DeviceCoupling, Event, GridModel
from .simulator import TrajectoryLog, max_deviation_map

log = logging.getLogger(__name__)

FLOAT_FMT = "{:.12f}"
SETTLE_BAND_HZ = 0.01
BUNDLED = ("ninebus", "scenario1", "scenario2", "scenario3")

_BUS_KEYS = {"id", "kind", "v", "angle", "load_p", "load_q"}
_BRANCH_KEYS = {"name", "from", "to", "r", "x", "b", "in_service"}
_SG_KEYS = {"name", "bus", "M", "D", "T_ch", "R_gov", "x_d", "dispatch", "v_set"}
_GFM_KEYS = {"name", "bus", "m_p", "m_q", "tau", "S", "k_pv", "k_iv", "x_c"}
_CONTROL_KEYS = {"zeta1", "zeta2", "alpha_bar", "p", "f_min", "f_max", "f_nominal",
                 "consensus_period", "safety_period", "mode"}
_EVENT_KEYS = {"time", "kind", "target", "magnitude", "unit", "reactive"}


@dataclass(frozen=True)
class SystemConfig:
    """A parsed system file: network, devices, control settings and the
    consensus communication graph."""

    model: GridModel
    sgs: tuple
    gfms: tuple
    control: ctl.ControlConfig
    graph: ctl.CommGraph
    name: str = ""

    @property
    def devices(self):
        return self.sgs + self.gfms


@dataclass(frozen=True)
class ScenarioScript:
    events: tuple = ()
    end_time: float = 60.0
    name: str = ""

    def __post_init__(self):
        times = [e.time for e in self.events]
        if any(t < 0 for t in times):
            raise ValidationError(["event times must be nonnegative"])
        if any(b < a for a, b in zip(times, times[1:])):
            raise ValidationError(["event times must be nondecreasing"])

    def __len__(self):
        return len(self.events)


@dataclass(frozen=True)
class ModeSummary:
    max_deviation_hz: float
    violation_depth_hz: float
    steady_state_hz: float
    settling_time: float          # nan when the CoI never settles
    sharing_mismatch: float


@dataclass
class RunSummary:
    modes: dict = field(default_factory=dict)    # mode -> ModeSummary

    def lines(self):
        out = []
        for mode, s in self.modes.items():
            out.append(f"[{mode}]")
            for key, val in dataclasses.asdict(s).items():
                out.append(f"{key} = {_fmt(val)}")
            out.append("")
        return out


# ---------------------------------------------------------------- parsing

def _load_toml(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ValidationError([f"{path}: cannot read file: {exc.strerror}"]) from exc
    try:
        return tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        where = f"line {exc.lineno}" if getattr(exc, "lineno", None) else "unknown line"
        msg = getattr(exc, "msg", str(exc))
        raise ValidationError([f"{path}: syntax error at {where}: {msg}"]) from exc


def _unknown(label, table, allowed, errors):
    for key in sorted(set(table) - allowed):
        errors.append(f"{label}: unknown key {key!r}")


def _number(label, table, key, errors, default=None):
    if key not in table:
        if default is None:
            errors.append(f"{label}: missing {key!r}")
            return math.nan
        return default
    val = table[key]
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        errors.append(f"{label}: {key!r} must be a number")
        return math.nan
    return float(val)


def _build(label, factory, errors, **kw):
    if any(isinstance(v, float) and math.isnan(v) for v in kw.values()):
        return None
    try:
        return factory(**kw)
    except ConfigError as exc:
        errors.extend(f"{label}: {msg}" for msg in str(exc).split("; "))
        return None


def system_from_dict(data, source="<system>") -> SystemConfig:
    """Validate a decoded system document; all problems are reported together."""
    errors = []
    _unknown(source, data, {"name", "bus", "branch", "generator", "storage", "control",
                            "communication"}, errors)
    buses, bus_ids = [], set()
    for k, tb in enumerate(data.get("bus", [])):
        bid = tb.get("id")
        label = f"bus {bid}" if bid is not None else f"bus entry {k + 1}"
        _unknown(label, tb, _BUS_KEYS, errors)
        if isinstance(bid, bool) or not isinstance(bid, int):
            errors.append(f"{label}: 'id' must be an integer")
            continue
        if bid in bus_ids:
            errors.append(f"{label}: duplicate bus id")
            continue
        bus_ids.add(bid)
        kind = tb.get("kind", "passive")
        if kind not in ("load", "passive"):
            errors.append(f"{label}: kind must be 'load' or 'passive', got {kind!r}")
        buses.append(Bus(bid, kind, _number(label, tb, "v", errors, 1.0),
                         _number(label, tb, "angle", errors, 0.0),
                         _number(label, tb, "load_p", errors, 0.0),
                         _number(label, tb, "load_q", errors, 0.0)))
        if kind == "passive" and (buses[-1].load_active or buses[-1].load_reactive):
            errors.append(f"{label}: passive bus carries load; declare kind = 'load'")
    if not buses:
        errors.append(f"{source}: no buses defined")

    branches, names = [], set()
    for k, tb in enumerate(data.get("branch", [])):
        name = tb.get("name", f"branch{k + 1}")
        label = f"branch {name}"
        _unknown(label, tb, _BRANCH_KEYS, errors)
        if name in names:
            errors.append(f"{label}: duplicate branch name")
        names.add(name)
        ends = []
        for key in ("from", "to"):
            bid = tb.get(key)
            if bid not in bus_ids:
                errors.append(f"{label}: '{key}' refers to unknown bus {bid!r}")
            ends.append(bid)
        if ends[0] == ends[1] and ends[0] is not None:
            errors.append(f"{label}: both ends on bus {ends[0]}")
        r = _number(label, tb, "r", errors, 0.0)
        x = _number(label, tb, "x", errors)
        if r < 0:
            errors.append(f"{label}: resistance must be nonnegative")
        if r == 0 and x == 0:
            errors.append(f"{label}: zero impedance")
        branches.append(Branch(ends[0], ends[1], r, x, _number(label, tb, "b", errors, 0.0),
                               bool(tb.get("in_service", True)), name))

    devices = set()
    sgs = []
    for k, tb in enumerate(data.get("generator", [])):
        name = tb.get("name", f"G{k + 1}")
        label = f"generator {name}"
        _unknown(label, tb, _SG_KEYS, errors)
        if name in devices:
            errors.append(f"{label}: duplicate device name")
        devices.add(name)
        if tb.get("bus") not in bus_ids:
            errors.append(f"{label}: unknown bus {tb.get('bus')!r}")
        params = _build(label, SgParams, errors, **{key: _number(label, tb, key, errors)
                                                    for key in ("M", "D", "T_ch", "R_gov", "x_d")})
        dispatch = None if "dispatch" not in tb else _number(label, tb, "dispatch", errors)
        if params is not None:
            sgs.append(SgUnit(name, tb.get("bus"), params, dispatch,
                              _number(label, tb, "v_set", errors, 1.0)))
    if not data.get("generator"):
        errors.append(f"{source}: at least one generator is required")
    elif sum("dispatch" not in tb for tb in data["generator"]) != 1:
        errors.append(f"{source}: exactly one generator must omit 'dispatch' (the slack unit)")

    gfms = []
    for k, tb in enumerate(data.get("storage", [])):
        name = tb.get("name", f"S{k + 1}")
        label = f"storage {name}"
        _unknown(label, tb, _GFM_KEYS, errors)
        if name in devices:
            errors.append(f"{label}: duplicate device name")
        devices.add(name)
        bus = tb.get("bus")
        if bus not in bus_ids:
            errors.append(f"{label}: unknown bus {bus!r}")
        kw = {key: _number(label, tb, key, errors) for key in ("m_p", "m_q", "tau", "S")}
        for key in ("k_pv", "k_iv", "x_c"):
            if key in tb:
                kw[key] = _number(label, tb, key, errors)
        params = _build(label, GfmParams, errors, **kw)
        if params is not None:
            gfms.append(GfmUnit(name, bus, params))

    ctl_tb = dict(data.get("control", {}))
    _unknown("control", ctl_tb, _CONTROL_KEYS, errors)
    f_kw = {k: _number("control", ctl_tb, k, errors, d) for k, d in
            (("f_min", 59.5), ("f_max", 60.5), ("f_nominal", 60.0))}
    c_kw = {k: _number("control", ctl_tb, k, errors, getattr(ctl.ControlConfig, k))
            for k in ("zeta1", "zeta2", "alpha_bar", "consensus_period", "safety_period")}
    c_kw["p"] = ctl_tb.get("p", ctl.ControlConfig.p)
    c_kw["mode"] = ctl_tb.get("mode", ctl.ControlConfig.mode)
    cfg = None
    if not any(math.isnan(v) for v in list(f_kw.values()) + list(c_kw.values())
               if isinstance(v, float)):
        try:
            cfg = ctl.ControlConfig.from_hz(**f_kw, **c_kw)
        except ConfigError as exc:
            errors.extend(f"control: {msg}" for msg in str(exc).split("; "))

    graph = None
    names = [u.name for u in gfms]
    comm = data.get("communication", {})
    _unknown("communication", comm, {"edges"}, errors)
    if "edges" in comm:
        pairs = []
        for pair in comm["edges"]:
            if len(pair) != 2 or any(p not in names for p in pair):
                errors.append(f"communication: edge {pair!r} names unknown storage units")
            else:
                pairs.append((names.index(pair[0]), names.index(pair[1])))
        if not errors:
            try:
                graph = ctl.CommGraph.from_edges(len(names), pairs)
            except ConfigError as exc:
                errors.append(f"communication: {exc}")
    elif gfms:
        graph = ctl.CommGraph.ring(len(gfms))

    if errors:
        raise ValidationError(errors)
    model = GridModel(buses, branches)
    couplings = [DeviceCoupling(u.name, u.bus, u.params.x_d, "sg") for u in sgs]
    couplings += [DeviceCoupling(u.name, u.bus, u.params.x_c, "gfm") for u in gfms]
    try:
        dataclasses.replace(model, couplings=tuple(couplings)).check_topology()
    except TopologyError as exc:
        raise ValidationError([f"{source}: {exc}"]) from exc
    return SystemConfig(model, tuple(sgs), tuple(gfms), cfg, graph or ctl.CommGraph(()),
                        str(data.get("name", "")))


def parse_system(path) -> SystemConfig:
    return system_from_dict(_load_toml(path), str(path))


def scenario_from_dict(data, source="<scenario>", system: SystemConfig | None = None) -> ScenarioScript:
    errors = []
    _unknown(source, data, {"name", "end_time", "event"}, errors)
    events = []
    for k, tb in enumerate(data.get("event", [])):
        label = f"event {k + 1}"
        _unknown(label, tb, _EVENT_KEYS, errors)
        kind = tb.get("kind")
        if kind not in EVENT_KINDS:
            errors.append(f"{label}: unknown kind {kind!r}; expected one of {EVENT_KINDS}")
            continue
        t = _number(label, tb, "time", errors)
        if t < 0:
            errors.append(f"{label}: time must be nonnegative")
        unit = tb.get("unit", "fraction")
        if unit not in ("fraction", "pu"):
            errors.append(f"{label}: unit must be 'fraction' or 'pu'")
        target = tb.get("target")
        if kind == "load_step":
            mag = _number(label, tb, "magnitude", errors)
        else:
            mag = 0.0
        reactive = None if "reactive" not in tb else _number(label, tb, "reactive", errors)
        if system is not None:
            errors.extend(f"{label}: {msg}" for msg in _target_problems(kind, target, system))
        events.append(Event(t, kind, target, mag, unit, reactive))
    for a, b in zip(events, events[1:]):
        if b.time < a.time:
            errors.append(f"event times decrease: {b.time:g} s follows {a.time:g} s")
    end = _number(source, data, "end_time", errors, 60.0)
    if errors:
        raise ValidationError(errors)
    return ScenarioScript(tuple(events), end, str(data.get("name", "")))


def _target_problems(kind, target, system: SystemConfig):
    if kind == "load_step":
        bus = {b.id: b for b in system.model.buses}.get(target)
        if bus is None:
            return [f"unknown bus {target!r}"]
        if bus.kind != "load":
            return [f"bus {target} is not a load bus"]
    elif kind == "gen_trip" and target not in {u.name for u in system.sgs}:
        return [f"unknown generator {target!r}"]
    elif kind == "branch_trip" and target not in {br.name for br in system.model.branches}:
        return [f"unknown branch {target!r}"]
    return []


def parse_scenario(path, system: SystemConfig | None = None) -> ScenarioScript:
    """Parse a scenario file; with ``system`` given, event targets are resolved too."""
    return scenario_from_dict(_load_toml(path), str(path), system)


def bundled(name) -> Path:
    """Path of a shipped data file, e.g. ``bundled("ninebus")``."""
    if name not in BUNDLED:
        raise KeyError(f"no bundled file {name!r}; available: {BUNDLED}")
    return Path(str(resources.files("safegrid") / "data" / f"{name}.toml"))


# ---------------------------------------------------------- serialization

def system_to_dict(system: SystemConfig) -> dict:
    """Canonical document; parsing it gives back an equal :class:`SystemConfig`."""
    cfg = system.control
    doc = {"name": system.name} if system.name else {}
    doc["bus"] = [{"id": b.id, "kind": b.kind, "v": b.voltage_magnitude, "angle": b.voltage_angle,
                   "load_p": b.load_active, "load_q": b.load_reactive} for b in system.model.buses]
    doc["branch"] = [{"name": br.name, "from": br.from_bus, "to": br.to_bus, "r": br.r, "x": br.x,
                      "b": br.charging, "in_service": br.in_service} for br in system.model.branches]
    doc["generator"] = []
    for u in system.sgs:
        p = u.params
        tb = {"name": u.name, "bus": u.bus, "M": p.M, "D": p.D, "T_ch": p.T_ch, "R_gov": p.R_gov,
              "x_d": p.x_d, "v_set": u.v_set}
        if u.dispatch is not None:
            tb["dispatch"] = u.dispatch
        doc["generator"].append(tb)
    doc["storage"] = [{"name": u.name, "bus": u.bus, "m_p": u.params.m_p, "m_q": u.params.m_q,
                       "tau": u.params.tau, "S": u.params.S, "k_pv": u.params.k_pv,
                       "k_iv": u.params.k_iv, "x_c": u.params.x_c} for u in system.gfms]
    doc["control"] = {"zeta1": cfg.zeta1, "zeta2": cfg.zeta2, "alpha_bar": cfg.alpha_bar, "p": cfg.p,
                      "f_min": ctl.rad_to_hz(cfg.omega_min), "f_max": ctl.rad_to_hz(cfg.omega_max),
                      "f_nominal": ctl.rad_to_hz(cfg.omega0),
                      "consensus_period": cfg.consensus_period, "safety_period": cfg.safety_period,
                      "mode": cfg.mode}
    names = [u.name for u in system.gfms]
    doc["communication"] = {"edges": [[names[i], names[j]] for i, j in system.graph.edges]}
    return doc


def scenario_to_dict(script: ScenarioScript) -> dict:
    doc = {"name": script.name} if script.name else {}
    doc["end_time"] = script.end_time
    doc["event"] = []
    for e in script.events:
        tb = {"time": e.time, "kind": e.kind, "target": e.target}
        if e.kind == "load_step":
            tb.update(magnitude=e.magnitude, unit=e.unit)
            if e.reactive is not None:
                tb["reactive"] = e.reactive
        doc["event"].append(tb)
    return doc


def dumps(doc) -> str:
    return tomli_w.dumps(doc)


# ---------------------------------------------------------------- results

def _fmt(x) -> str:
    if isinstance(x, float) and math.isnan(x):
        return "nan"
    return FLOAT_FMT.format(x)


def summarize(log: TrajectoryLog, cfg: ctl.ControlConfig, last_event_time=None) -> ModeSummary:
    f = log.coi_hz
    f0 = ctl.rad_to_hz(cfg.omega0)
    lo, hi = ctl.rad_to_hz(cfg.omega_min), ctl.rad_to_hz(cfg.omega_max)
    dev = np.abs(f - f0)
    depth = float(np.max(np.maximum(0.0, np.maximum(lo - f, f - hi)), initial=0.0))
    if last_event_time is None:
        last_event_time = max((t for t, _ in log.events), default=0.0)
    outside = np.nonzero((dev > SETTLE_BAND_HZ) & (log.t >= last_event_time))[0]
    if outside.size == 0:
        settle = 0.0
    elif outside[-1] == len(f) - 1:
        settle = math.nan
    else:
        settle = float(log.t[outside[-1] + 1] - last_event_time)
    shares = log.m_p * log.p_set[-1] if log.p_set.shape[0] else np.zeros(0)
    mismatch = float(shares.max() - shares.min()) if shares.size else 0.0
    return ModeSummary(float(dev.max(initial=0.0)), depth, float(dev[-1]) if dev.size else 0.0,
                       settle, mismatch)


def trajectory_columns(log: TrajectoryLog):
    cols = ["t"] + [f"omega_{n}" for n in log.sg_names]
    for n in log.gfm_names:
        cols += [f"omega_{n}", f"p_set_con_{n}", f"p_low_{n}", f"p_up_{n}", f"p_set_{n}", f"p_inj_{n}"]
    return cols + ["coi_hz"]


def trajectory_matrix(log: TrajectoryLog) -> np.ndarray:
    blocks = [log.t[:, None], log.sg_omega]
    for j in range(len(log.gfm_names)):
        blocks.append(np.column_stack([log.gfm_omega[:, j], log.p_con[:, j], log.p_low[:, j],
                                       log.p_up[:, j], log.p_set[:, j], log.p_inj[:, j]]))
    blocks.append(log.coi_hz[:, None])
    return np.hstack(blocks)


def _write(path: Path, text: str):
    try:
        path.write_text(text)
    except OSError as exc:
        raise SafegridError(f"cannot write {path}: {exc.strerror}") from exc


def emit_results(log: TrajectoryLog, summary: ModeSummary | RunSummary, out_dir) -> list:
    """Write trajectories.csv, heatmap.csv and summary.txt into ``out_dir``."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise SafegridError(f"cannot create {out}: {exc.strerror}") from exc
    buf = io.StringIO()
    buf.write(",".join(trajectory_columns(log)) + "\n")
    np.savetxt(buf, trajectory_matrix(log), fmt="%.12f", delimiter=",")
    paths = [out / "trajectories.csv", out / "heatmap.csv", out / "summary.txt"]
    _write(paths[0], buf.getvalue())
    heat = max_deviation_map(log)
    _write(paths[1], "bus,max_deviation_hz\n"
           + "".join(f"{b},{_fmt(float(v))}\n" for b, v in zip(log.bus_ids, heat)))
    if isinstance(summary, ModeSummary):
        summary = RunSummary({log.mode: summary})
    _write(paths[2], "\n".join(summary.lines()))
    return paths
