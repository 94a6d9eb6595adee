import copy
import math
import random

import numpy as np
import pytest
import tomli

from safegrid import cli
from safegrid.control import ControlConfig
from safegrid.errors import ValidationError
from safegrid.scenario_io import (BUNDLED, ModeSummary, ScenarioScript, bundled, dumps, emit_results,
                                  parse_scenario, parse_system, scenario_from_dict, scenario_to_dict,
                                  summarize, system_from_dict, system_to_dict, trajectory_columns)
from safegrid.simulator import ScheduleConfig, Simulator


@pytest.fixture(scope="module")
def ninebus_doc():
    return tomli.loads(bundled("ninebus").read_text())


@pytest.fixture(scope="module")
def ninebus():
    return parse_system(bundled("ninebus"))


def test_bundled_files_exist():
    for name in BUNDLED:
        assert bundled(name).is_file()
    with pytest.raises(KeyError):
        bundled("ieee68")


def test_bundled_system_parses_clean(ninebus, caplog):
    assert len(ninebus.model.buses) == 9
    assert (len(ninebus.sgs), len(ninebus.gfms)) == (3, 3)
    kinds = {b.id: b.kind for b in ninebus.model.buses}
    assert all(kinds[u.bus] == "load" for u in ninebus.gfms)
    # storage capacity totals a tenth of the load
    assert sum(u.params.S for u in ninebus.gfms) == pytest.approx(0.1 * ninebus.model.total_load, rel=1e-6)
    assert "WARNING" not in caplog.text
    assert all(cli.ctl.theorem1_preconditions(u.params, ninebus.control).ok for u in ninebus.gfms)


def test_zero_droop_is_named(ninebus_doc):
    doc = copy.deepcopy(ninebus_doc)
    doc["storage"][1]["m_p"] = 0.0
    with pytest.raises(ValidationError) as info:
        system_from_dict(doc)
    name = doc["storage"][1]["name"]
    assert any(name in e and "droop gain must be positive" in e for e in info.value.errors)


def test_branch_to_unknown_bus_is_named(ninebus_doc):
    doc = copy.deepcopy(ninebus_doc)
    doc["branch"][0]["to"] = 42
    with pytest.raises(ValidationError, match="unknown bus 42"):
        system_from_dict(doc)


def test_all_errors_reported_together(ninebus_doc):
    doc = copy.deepcopy(ninebus_doc)
    doc["branch"][0]["to"] = 42
    doc["storage"][0]["tau"] = -1.0
    doc["generator"][0]["colour"] = "red"
    with pytest.raises(ValidationError) as info:
        system_from_dict(doc)
    assert len(info.value.errors) >= 3


def test_syntax_error_reports_line(tmp_path):
    p = tmp_path / "broken.toml"
    p.write_text('[[bus]]\nid = 1\nkind = "load\n')
    with pytest.raises(ValidationError, match=r"line 3"):
        parse_system(p)


def test_islanded_system_rejected(ninebus_doc):
    doc = copy.deepcopy(ninebus_doc)
    doc["branch"] = [br for br in doc["branch"] if 9 not in (br["from"], br["to"])]
    with pytest.raises(ValidationError, match="9"):
        system_from_dict(doc)


def test_bundled_scenario_one_times(ninebus):
    script = parse_scenario(bundled("scenario1"), ninebus)
    assert [e.time for e in script.events] == [1.0, 6.0, 12.0, 26.0, 36.0]


def test_other_bundled_scenarios_resolve(ninebus):
    for name in ("scenario2", "scenario3"):
        assert len(parse_scenario(bundled(name), ninebus)) >= 1


def test_empty_scenario_runs_flat(ninebus):
    script = scenario_from_dict({"end_time": 0.5})
    assert len(script) == 0
    cfg = ninebus.control
    lg = Simulator(ninebus.model, ninebus.sgs, ninebus.gfms, cfg,
                   ScheduleConfig.from_control(cfg, end_time=script.end_time), ninebus.graph).run()
    assert np.abs(lg.coi_hz - 60.0).max() < 1e-9


def test_decreasing_times_rejected():
    doc = {"event": [{"time": 2.0, "kind": "gen_trip", "target": "G3"},
                     {"time": 1.0, "kind": "gen_trip", "target": "G2"}]}
    with pytest.raises(ValidationError, match="decrease"):
        scenario_from_dict(doc)
    with pytest.raises(ValidationError):
        ScenarioScript(events=tuple(reversed(scenario_from_dict({"event": doc["event"][::-1]}).events)))


def test_scenario_targets_resolved(ninebus):
    doc = {"event": [{"time": 1.0, "kind": "load_step", "target": 1, "magnitude": 0.1},
                     {"time": 2.0, "kind": "gen_trip", "target": "S5"},
                     {"time": 3.0, "kind": "branch_trip", "target": "nope"}]}
    with pytest.raises(ValidationError) as info:
        scenario_from_dict(doc, system=ninebus)
    assert len(info.value.errors) == 3


def test_system_round_trip(ninebus):
    again = system_from_dict(tomli.loads(dumps(system_to_dict(ninebus))))
    assert again == ninebus


def test_scenario_round_trip(ninebus):
    script = parse_scenario(bundled("scenario1"), ninebus)
    assert scenario_from_dict(tomli.loads(dumps(scenario_to_dict(script)))) == script


def _short_run(system, mode="safety-consensus", end=0.3, events=()):
    import dataclasses
    cfg = dataclasses.replace(system.control, mode=mode)
    sim = Simulator(system.model, system.sgs, system.gfms, cfg,
                    ScheduleConfig.from_control(cfg, end_time=end, events=events), system.graph)
    lg = sim.run()
    return lg, summarize(lg, cfg)


def test_equilibrium_output_columns(ninebus, tmp_path):
    lg, summary = _short_run(ninebus)
    emit_results(lg, summary, tmp_path)
    lines = (tmp_path / "trajectories.csv").read_text().splitlines()
    header = lines[0].split(",")
    assert header == trajectory_columns(lg)
    assert header[:4] == ["t", "omega_G1", "omega_G2", "omega_G3"]
    assert header[-1] == "coi_hz" and len(lines) == len(lg.t) + 1
    assert {row.split(",")[-1] for row in lines[1:]} == {"60.000000000000"}
    heat = (tmp_path / "heatmap.csv").read_text().splitlines()
    assert heat[0] == "bus,max_deviation_hz" and len(heat) == 10
    text = (tmp_path / "summary.txt").read_text()
    assert "[safety-consensus]" in text and "violation_depth_hz = 0.000000000000" in text


def test_emit_is_byte_identical(ninebus, tmp_path):
    lg, summary = _short_run(ninebus)
    emit_results(lg, summary, tmp_path / "a")
    emit_results(lg, summary, tmp_path / "b")
    for name in ("trajectories.csv", "heatmap.csv", "summary.txt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_emit_failure_names_path(ninebus, tmp_path):
    lg, summary = _short_run(ninebus, end=0.01)
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(Exception, match=str(blocker)):
        emit_results(lg, summary, blocker / "sub")


def test_summary_metrics_from_synthetic_log(ninebus):
    lg, _ = _short_run(ninebus, end=1.0)
    lg.coi_omega[500:] += 2 * math.pi * 0.6       # CoI jumps to 60.6 Hz halfway
    s = summarize(lg, ControlConfig(), last_event_time=0.2)
    assert s.max_deviation_hz == pytest.approx(0.6, abs=1e-9)
    assert s.violation_depth_hz == pytest.approx(0.1, abs=1e-9)
    assert math.isnan(s.settling_time)
    assert isinstance(s, ModeSummary)


# ------------------------------------------------------------------- CLI

def _paths(tmp_path, end=0.3):
    sc = tmp_path / "short.toml"
    sc.write_text(dumps({"end_time": end, "event": [{"time": 0.1, "kind": "load_step", "target": 5,
                                                     "magnitude": -0.01}]}))
    return str(bundled("ninebus")), str(sc)


def test_cli_run(tmp_path, capsys):
    system, scenario = _paths(tmp_path)
    out = tmp_path / "res"
    code = cli.cli_main(["run", "--system", system, "--scenario", scenario, "--mode", "consensus",
                         "--out", str(out)])
    assert code == 0
    assert sorted(p.name for p in out.iterdir()) == ["heatmap.csv", "summary.txt", "trajectories.csv"]
    assert "[consensus]" in capsys.readouterr().out


def test_cli_compare_makes_sibling_directories(tmp_path):
    system, scenario = _paths(tmp_path, end=0.2)
    out = tmp_path / "cmp"
    assert cli.cli_main(["compare", "--system", system, "--scenario", scenario, "--out", str(out)]) == 0
    assert sorted(p.name for p in out.iterdir() if p.is_dir()) == \
        ["consensus", "no-secondary", "safety-consensus"]
    joint = (out / "summary.txt").read_text()
    assert joint.count("[") == 3


def test_cli_validate(capsys):
    assert cli.cli_main(["validate", "--system", str(bundled("ninebus")),
                         "--scenario", str(bundled("scenario1"))]) == 0
    out = capsys.readouterr().out
    assert "9 buses" in out and "5 events" in out


def test_cli_validate_lists_warnings(tmp_path, ninebus_doc, capsys):
    doc = copy.deepcopy(ninebus_doc)
    doc["storage"][0]["m_p"] = 50.0
    p = tmp_path / "weak.toml"
    p.write_text(dumps(doc))
    assert cli.cli_main(["validate", "--system", str(p)]) == 0
    assert "warning: safety preconditions not met on 1 storage unit" in capsys.readouterr().out


def test_cli_invalid_input_exit_2(tmp_path, ninebus_doc, capsys):
    doc = copy.deepcopy(ninebus_doc)
    doc["storage"][0]["m_p"] = 0.0
    p = tmp_path / "bad.toml"
    p.write_text(dumps(doc))
    assert cli.cli_main(["validate", "--system", str(p)]) == 2
    assert "droop gain must be positive" in capsys.readouterr().err
    assert cli.cli_main(["validate", "--system", str(tmp_path / "missing.toml")]) == 2


def test_cli_unknown_flag_exit_2(capsys):
    assert cli.cli_main(["run", "--bogus"]) == 2
    assert "usage" in capsys.readouterr().err


def test_cli_runtime_failure_exit_3(tmp_path, capsys):
    system = str(bundled("ninebus"))
    sc = tmp_path / "trip.toml"
    sc.write_text(dumps({"end_time": 0.5, "event": [{"time": 0.1, "kind": "load_step", "target": 5,
                                                     "magnitude": 40.0}]}))
    assert cli.cli_main(["run", "--system", system, "--scenario", str(sc), "--out",
                         str(tmp_path / "r")]) == 3
    assert "error:" in capsys.readouterr().err


def test_seed_free_audit(tmp_path, capsys):
    system, scenario = _paths(tmp_path, end=0.1)
    assert cli.cli_main(["run", "--system", system, "--scenario", scenario, "--seed-free",
                         "--out", str(tmp_path / "r")]) == 0
    assert "seed-free audit: passed" in capsys.readouterr().out


def test_seed_free_audit_catches_rng():
    with pytest.raises(cli.RngUsed):
        with cli.forbid_rng():
            random.random()
    with pytest.raises(cli.RngUsed):
        with cli.forbid_rng():
            np.random.default_rng(0)
    random.random()          # entry points are restored afterwards
