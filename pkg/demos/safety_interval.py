"""Print the set-point interval allowed by the safety layer across the
frequency band, and the precondition report for each bundled storage unit."""
import numpy as np

from safegrid.control import ControlConfig, hz_to_rad, safety_bounds, theorem1_preconditions
from safegrid.scenario_io import bundled, parse_system

cfg = ControlConfig()
m_p = 0.05

print("f (Hz)     P_low          P_up        (P = 0, m_p = 0.05)")
for f in np.linspace(59.4, 60.6, 13):
    b = safety_bounds(hz_to_rad(f), 0.0, m_p, cfg)
    print(f"{f:7.2f} {b.P_low:14.4g} {b.P_up:14.4g}")

system = parse_system(bundled("ninebus"))
print()
for unit in system.gfms:
    for line in theorem1_preconditions(unit.params, system.control).lines(unit.name):
        print(line)
