import math

import pytest

from safegrid.control import ControlConfig
from safegrid.devices import GfmParams, GfmUnit, SgParams, SgUnit
from safegrid.netmodel import Branch, Bus, GridModel

W0 = 2 * math.pi * 60


def four_bus(lossless=False, with_gfm=True, D=1.0):
    """Two generators, one storage unit, two loads on a small meshed network."""
    r = 0.0 if lossless else 0.01
    buses = [Bus(1), Bus(2, "load", load_active=1.2, load_reactive=0.3), Bus(3, "load", load_active=0.8,
                                                                              load_reactive=0.2), Bus(4)]
    branches = [Branch(1, 2, r, 0.08, name="a"), Branch(2, 3, r, 0.1, name="b"),
                Branch(3, 4, r, 0.07, name="c"), Branch(4, 1, r, 0.12, name="d")]
    sgs = [SgUnit("G1", 1, SgParams(M=2 * 5 * 2.0 / W0, D=D * 2.0 / W0, T_ch=0.5, R_gov=0.05 * W0 / 2.0, x_d=0.15)),
           SgUnit("G4", 4, SgParams(M=2 * 5 * 1.5 / W0, D=D * 1.5 / W0, T_ch=0.5, R_gov=0.05 * W0 / 1.5, x_d=0.2),
                  dispatch=0.9)]
    gfms = [GfmUnit("S3", 3, GfmParams(m_p=0.05 * W0 / 0.4, m_q=0.05 / 0.4, tau=0.01, S=0.4))] if with_gfm else []
    return GridModel(buses, branches), sgs, gfms


@pytest.fixture
def small():
    return four_bus()


@pytest.fixture
def cfg():
    return ControlConfig()


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
