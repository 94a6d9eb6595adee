"""Command line: ``safegrid run | validate | compare``.

Exit codes: 0 success, 2 invalid input, 3 solver failure or simulation abort.
"""
from __future__ import annotations

import argparse
import contextlib
import dataclasses
import logging
import random
import sys
from pathlib import Path

import numpy as np

from . import control as ctl
from .errors import (ConfigError, EventError, InitializationError, SafegridError, SimulationAbort,
                     SolverError, TopologyError, ValidationError)
from .scenario_io import (RunSummary, ScenarioScript, SystemConfig, _write, emit_results, parse_scenario,
                          parse_system, summarize)
from .simulator import ScheduleConfig, Simulator

log = logging.getLogger("safegrid")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 2, 3


class RngUsed(SafegridError):
    pass


class RunFailure(SafegridError):
    """Any error raised after the inputs were accepted."""


@contextlib.contextmanager
def forbid_rng():
    """Make every stdlib and numpy random entry point raise, and check afterwards
    that neither global generator state moved."""
    def trap(name):
        def _raise(*a, **kw):
            raise RngUsed(f"random number generator called via {name}")
        return _raise

    py_state, np_state = random.getstate(), np.random.get_state()
    patched = []
    for mod, names in ((random, ("random", "uniform", "randint", "choice", "shuffle", "gauss",
                                 "normalvariate", "seed")),
                       (np.random, ("rand", "randn", "random", "randint", "normal", "uniform",
                                    "choice", "shuffle", "permutation", "seed", "default_rng"))):
        for name in names:
            patched.append((mod, name, getattr(mod, name)))
            setattr(mod, name, trap(f"{mod.__name__}.{name}"))
    try:
        yield
    finally:
        for mod, name, orig in patched:
            setattr(mod, name, orig)
    if random.getstate() != py_state:
        raise RngUsed("stdlib random state changed during the run")
    after = np.random.get_state()
    if after[0] != np_state[0] or not np.array_equal(after[1], np_state[1]) or after[2:] != np_state[2:]:
        raise RngUsed("numpy random state changed during the run")


def _parser():
    p = argparse.ArgumentParser(prog="safegrid", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, scenario=True):
        sp.add_argument("--system", required=True, type=Path, help="system TOML file")
        if scenario:
            sp.add_argument("--scenario", required=True, type=Path, help="scenario TOML file")
            sp.add_argument("--out", type=Path, default=Path("results"), help="output directory")
            sp.add_argument("--step", type=float, help="integration step in s (default 0.001)")
            sp.add_argument("--end-time", type=float, help="override the scenario end time (s)")
            sp.add_argument("--seed-free", action="store_true",
                            help="fail if any random number generator is touched")

    run = sub.add_parser("run", help="simulate one control mode")
    common(run)
    run.add_argument("--mode", choices=ctl.MODES, help="control mode (default: from system file)")
    cmp_ = sub.add_parser("compare", help="simulate several modes into sibling directories")
    common(cmp_)
    cmp_.add_argument("--modes", default=",".join(ctl.MODES),
                      help="comma-separated modes (default: all three)")
    val = sub.add_parser("validate", help="check input files and the safety preconditions")
    common(val, scenario=False)
    val.add_argument("--scenario", type=Path, help="also check a scenario file")
    return p


def _schedule(system: SystemConfig, script: ScenarioScript, args) -> ScheduleConfig:
    kw = {"end_time": script.end_time if args.end_time is None else args.end_time}
    if args.step is not None:
        kw["step"] = args.step
    return ScheduleConfig.from_control(system.control, events=script.events, **kw)


def _run_mode(system, script, args, mode):
    cfg = dataclasses.replace(system.control, mode=mode)
    schedule = _schedule(system, script, args)
    sim = Simulator(system.model, system.sgs, system.gfms, cfg, schedule, system.graph)
    try:
        lg = sim.run()
    except SafegridError as exc:
        raise RunFailure(f"{mode}: {exc}") from exc
    last = max((e.time for e in script.events), default=0.0)
    return lg, summarize(lg, cfg, last)


def _report_preconditions(system: SystemConfig, out=sys.stdout):
    warnings = 0
    for u in system.gfms:
        rep = ctl.theorem1_preconditions(u.params, system.control)
        if not rep.ok:
            warnings += 1
        for line in rep.lines(u.name):
            print(f"  {line}", file=out)
    return warnings


def cmd_validate(args):
    system = parse_system(args.system)
    print(f"{args.system}: {len(system.model.buses)} buses, {len(system.model.branches)} branches, "
          f"{len(system.sgs)} generators, {len(system.gfms)} storage units")
    warnings = _report_preconditions(system)
    if args.scenario is not None:
        script = parse_scenario(args.scenario, system)
        print(f"{args.scenario}: {len(script)} events, end time {script.end_time:g} s")
    if warnings:
        print(f"warning: safety preconditions not met on {warnings} storage unit(s)")
    return EXIT_OK


def _guarded(args, fn):
    if getattr(args, "seed_free", False):
        with forbid_rng():
            result = fn()
        print("seed-free audit: passed")
        return result
    return fn()


def cmd_run(args):
    system = parse_system(args.system)
    script = parse_scenario(args.scenario, system)
    mode = args.mode or system.control.mode

    def go():
        lg, summary = _run_mode(system, script, args, mode)
        emit_results(lg, summary, args.out)
        return summary

    summary = _guarded(args, go)
    print("\n".join(RunSummary({mode: summary}).lines()).rstrip())
    return EXIT_OK


def cmd_compare(args):
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    bad = [m for m in modes if m not in ctl.MODES]
    if bad or not modes:
        raise ValidationError([f"unknown mode {m!r}; expected one of {ctl.MODES}" for m in bad]
                              or ["no modes given"])
    system = parse_system(args.system)
    script = parse_scenario(args.scenario, system)

    def go():
        joint = RunSummary()
        for mode in modes:
            lg, summary = _run_mode(system, script, args, mode)
            emit_results(lg, summary, Path(args.out) / mode)
            joint.modes[mode] = summary
        _write(Path(args.out) / "summary.txt", "\n".join(joint.lines()))
        return joint

    joint = _guarded(args, go)
    print("\n".join(joint.lines()).rstrip())
    return EXIT_OK


_INVALID = (ValidationError, ConfigError, TopologyError, EventError)
_RUNTIME = (RunFailure, RngUsed, SolverError, SimulationAbort, InitializationError, SafegridError)


def cli_main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handler = {"run": cmd_run, "compare": cmd_compare, "validate": cmd_validate}[args.command]
    try:
        return handler(args)
    except _INVALID as exc:
        errors = exc.errors if isinstance(exc, ValidationError) else [str(exc)]
        for msg in errors:
            print(f"error: {msg}", file=sys.stderr)
        return EXIT_INVALID
    except _RUNTIME as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main():
    sys.exit(cli_main())
