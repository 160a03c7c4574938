import csv
import io

import pytest

from stsim.cli import emit_summary, main, parse_config, run_experiment
from stsim.errors import ConfigError, ParseError, SummaryError
from stsim.faces import CSV_COLUMNS, GridSpec

SMALL = "outer = 1\nmiddle = 1\ninner = 2\n"


def rows_of(text):
    return list(csv.DictReader(io.StringIO(text)))


def test_single_run_plan():
    plan = parse_config("variant = st_arma\ngrid = 2x2x2\n")
    assert len(plan.configs) == 1
    cfg = plan.configs[0]
    assert cfg.variant == "st_arma" and cfg.grid.dims == (2, 2, 2)


def test_list_makes_a_sweep_with_derived_seeds():
    plan = parse_config("variant = p2p,arma,st_arma\nseed = 40\n")
    assert [c.variant for c in plan.configs] == ["p2p", "arma", "st_arma"]
    assert [c.seed for c in plan.configs] == [40, 41, 42]
    assert len(set(plan.keys)) == 3


def test_sweep_is_cartesian():
    plan = parse_config("variant = arma,st_arma\nthrottle = static,adaptive\nmerge = merged\n")
    assert len(plan.configs) == 4


@pytest.mark.parametrize("text,line", [
    ("grid = 2x2\n", 1),
    ("# comment\n\nwarp = 9\n", 3),
    ("inner = 1,2\n", 1),
    ("inner = many\n", 1),
    ("variant = arma\nnonsense\n", 2),
    ("overlap = sometimes\n", 1),
])
def test_parse_errors_carry_line_numbers(text, line):
    with pytest.raises(ParseError) as err:
        parse_config(text)
    assert err.value.line == line
    assert str(err.value).startswith(f"line {line}:")


def test_invariant_violations_are_config_errors():
    with pytest.raises(ConfigError):
        parse_config("variant = mpi\n")
    with pytest.raises(ConfigError):
        parse_config("grid = 2x2x2,2x2x2\n")
    with pytest.raises(ConfigError):
        parse_config("counter_mode = sometimes\n")


def test_cost_overrides_reach_the_model():
    plan = parse_config("host_sync = 20000\n")
    assert plan.configs[0].cost_model().host_sync == 20000


def test_summary_formats_percent_delta():
    text = ",".join(CSV_COLUMNS) + "\n"
    base = dict.fromkeys(CSV_COLUMNS, "1")
    for variant, t in (("arma", 100), ("st_arma", 80)):
        row = dict(base, variant=variant, virtual_time_ns=str(t))
        text += ",".join(row[c] for c in CSV_COLUMNS) + "\n"
    assert emit_summary(text) == "st_arma vs arma: -20.0%"


def test_summary_single_row_and_mixed_grids():
    head = ",".join(CSV_COLUMNS) + "\n"
    row = dict.fromkeys(CSV_COLUMNS, "1")
    line = ",".join(row[c] for c in CSV_COLUMNS) + "\n"
    assert emit_summary(head + line) == ""
    other = dict(row, px="2")
    with pytest.raises(SummaryError):
        emit_summary(head + line + ",".join(other[c] for c in CSV_COLUMNS) + "\n")


def test_run_experiment_writes_csv_traces_and_summary(tmp_path):
    csv_path, trace = tmp_path / "out.csv", tmp_path / "run.trace"
    plan = parse_config(SMALL + f"variant = arma,st_arma\ncsv = {csv_path}\ntrace = {trace}\n")
    out, err = io.StringIO(), io.StringIO()
    assert run_experiment(plan, out, err) == 0
    rows = rows_of(csv_path.read_text())
    assert [r["variant"] for r in rows] == ["arma", "st_arma"]
    assert (tmp_path / "run.0.trace").exists() and (tmp_path / "run.1.trace").exists()
    first = (tmp_path / "run.0.trace").read_text().splitlines()[0].split(" ")
    assert first[0].isdigit() and first[1].isdigit()
    assert "st_arma vs arma:" in out.getvalue()


def test_rerun_reproduces_csv_bytes(tmp_path):
    texts = []
    for i in range(2):
        path = tmp_path / f"r{i}.csv"
        plan = parse_config(SMALL + f"variant = p2p,st_arma\ncsv = {path}\n")
        assert run_experiment(plan, io.StringIO(), io.StringIO()) == 0
        texts.append(path.read_bytes())
    assert texts[0] == texts[1]


def test_eight_by_eight_shape_favours_stream_triggered():
    plan = parse_config(SMALL + "grid = 4x4x4\nranks_per_node = 8\nvariant = arma,st_arma\n")
    out = io.StringIO()
    assert run_experiment(plan, out, io.StringIO()) == 0
    arma, st = rows_of(out.getvalue())
    assert int(st["virtual_time_ns"]) < int(arma["virtual_time_ns"])


def test_merged_sweep_launches_fewer_kernels():
    plan = parse_config(SMALL + "merge = independent,merged\n")
    out = io.StringIO()
    assert run_experiment(plan, out, io.StringIO()) == 0
    indep, merged = rows_of(out.getvalue())
    assert int(merged["kernel_launches"]) < int(indep["kernel_launches"])


def test_verification_failure_exits_one(monkeypatch):
    from stsim.gpu import FaultPlan

    plan = parse_config(SMALL)
    plan.configs[0] = plan.configs[0].with_(faults=FaultPlan(misroute_puts_from=0))
    err = io.StringIO()
    assert run_experiment(plan, io.StringIO(), err) == 1
    assert "verification failed" in err.getvalue()


def test_deadlock_exits_one():
    from stsim.gpu import FaultPlan

    plan = parse_config(SMALL)
    plan.configs[0] = plan.configs[0].with_(faults=FaultPlan(drop_signal_to=0))
    err = io.StringIO()
    assert run_experiment(plan, io.StringIO(), err) == 1
    assert "deadlock" in err.getvalue().lower()


def test_main_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.conf"
    bad.write_text("grid = 2x2\n")
    assert main(["--config", str(bad)]) == 2
    assert "line 1" in capsys.readouterr().err
    assert main(["--variant", "nope"]) == 2
    good = tmp_path / "good.conf"
    good.write_text(SMALL + "variant = arma\n")
    csv_path = tmp_path / "o.csv"
    assert main(["--config", str(good), "--variant", "st_arma", "--grid", "2x1x1",
                 "--ranks-per-node", "1", "--csv", str(csv_path),
                 "--cost", "host_sync=5000"]) == 0
    (row,) = rows_of(csv_path.read_text())
    assert row["variant"] == "st_arma" and row["px"] == "2"


def test_grid_spec_defaults_match_single_node_shape():
    plan = parse_config("")
    assert plan.configs[0].grid == GridSpec(2, 2, 2, 8)
    assert plan.configs[0].variant == "st_arma"
