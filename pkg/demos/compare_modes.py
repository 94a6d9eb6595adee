"""Run one bundled scenario under all three control modes and print the
frequency envelope of each.

    python demos/compare_modes.py scenario1 [out_dir]
"""
import dataclasses
import sys
from pathlib import Path

from safegrid.control import MODES
from safegrid.scenario_io import bundled, emit_results, parse_scenario, parse_system, summarize
from safegrid.simulator import ScheduleConfig, Simulator


def main(name="scenario1", out=None):
    system = parse_system(bundled("ninebus"))
    script = parse_scenario(bundled(name), system)
    print(f"{name}: {len(script)} events, {script.end_time:g} s")
    print(f"{'mode':<18}{'min Hz':>10}{'max Hz':>10}{'final dev':>12}{'sharing':>10}")
    for mode in MODES:
        cfg = dataclasses.replace(system.control, mode=mode)
        sched = ScheduleConfig.from_control(cfg, end_time=script.end_time, events=script.events)
        lg = Simulator(system.model, system.sgs, system.gfms, cfg, sched, system.graph).run()
        s = summarize(lg, cfg)
        f = lg.coi_hz
        print(f"{mode:<18}{f.min():>10.4f}{f.max():>10.4f}{s.steady_state_hz:>12.2e}{s.sharing_mismatch:>10.2e}")
        if out:
            emit_results(lg, s, Path(out) / mode)


if __name__ == "__main__":
    main(*sys.argv[1:])
