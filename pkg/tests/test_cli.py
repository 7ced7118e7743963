import json

import pytest

from conftest import chain_dataset
from feeder_reduce.cli import load_config, main, render_table, report_label
from feeder_reduce.dynamics import EventMetrics
from feeder_reduce.fixtures import DATA_DIR
from feeder_reduce.ingest import write_sections

FIXTURE = str(DATA_DIR / "feederA-synth.csv")


@pytest.fixture
def small_csv(tmp_path):
    d = chain_dataset([0.2] * 6, [None, 0.01 + 0.005j, None, 0.02 + 0.01j, 0.01 + 0.004j, 0.02 + 0.01j], name="small")
    path = tmp_path / "small.csv"
    write_sections(d, path)
    return str(path)


def run(argv, capsys):
    code = main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.mark.parametrize("cmd", [[], ["ingest"], ["visualize"], ["powerflow"], ["reduce"], ["simulate"], ["report"], ["gen-fixture"]])
def test_help_exits_zero(cmd, capsys):
    with pytest.raises(SystemExit) as exc:
        main(cmd + ["--help"])
    assert exc.value.code == 0
    assert "usage" in capsys.readouterr().out


def test_ingest_writes_validation(tmp_path, capsys):
    code, out, _ = run(["ingest", FIXTURE, "--out", str(tmp_path)], capsys)
    assert code == 0 and "478 nodes" in out
    body = json.loads((tmp_path / "feederA-synth.validation.json").read_text())
    assert body["validation"]["accepted"] is True
    assert len(body["validation"]["parallel_merges"]) == 8


def test_powerflow_reports_head_power(tmp_path, capsys):
    out_file = tmp_path / "pf.json"
    code, out, _ = run(["powerflow", FIXTURE, "--out", str(out_file), "--quiet"], capsys)
    assert code == 0 and out == ""
    body = json.loads(out_file.read_text())
    assert len(body["nodes"]) == 478


def test_visualize_small_feeder(tmp_path, small_csv, capsys):
    for fmt in ("svg", "dot", "json"):
        code, _, err = run(["visualize", small_csv, "--format", fmt, "--out", str(tmp_path), "--boundaries"], capsys)
        assert code == 0, err
        assert (tmp_path / f"small.{fmt}").exists()
    body = json.loads((tmp_path / "small.json").read_text())
    assert len(body["nodes"]) == 7 and len(body["dividers"]) == 2


def test_reduce_then_simulate_then_report(tmp_path, capsys):
    code, out, err = run(["reduce", FIXTURE, "--out", str(tmp_path), "--name", "feeder-M"], capsys)
    assert code == 0, err
    model = tmp_path / "feeder-M.json"
    assert json.loads(model.read_text())["name"] == "feeder-M"
    metric_files = []
    for src in ("builtin:O", str(model)):
        for scen in ("S1", "S2", "S3"):
            code, out, err = run(["simulate", src, "--scenario", scen, "--out", str(tmp_path), "--quiet"], capsys)
            assert code == 0, err
            name = "feeder-O" if src == "builtin:O" else "feeder-M"
            metric_files.append(str(tmp_path / f"{name}.{scen}.metrics.json"))
            assert (tmp_path / f"{name}.{scen}.csv").exists()
    code, table, _ = run(["report", *metric_files], capsys)
    assert code == 0
    rows = [ln for ln in table.splitlines() if ln.startswith("| ") and "/" in ln.split("|")[1] and "Type" not in ln]
    assert len(rows) == 6
    assert rows[0].startswith("| O/1 | trips |")
    assert rows[4].startswith("| M/2 | chatters |") and rows[4].endswith("| 2 | {1,1,0} |")


def test_simulate_grid(tmp_path, capsys):
    grid = tmp_path / "grid.json"
    grid.write_text(json.dumps([{"name": "a", "fault_impedance": 0.5, "t_end_ms": 300.0},
                                {"name": "b", "fault_impedance": 0.02, "t_end_ms": 300.0}]))
    code, _, err = run(["simulate", "builtin:O", "--grid", str(grid), "--out", str(tmp_path), "--quiet"], capsys)
    assert code == 0, err
    rows = json.loads((tmp_path / "feeder-O.sweep.json").read_text())
    assert [r["metrics"]["st"] for r in rows] == ["noAffect", "trips"]


def test_gen_fixture_matches_shipped(tmp_path, capsys):
    code, _, _ = run(["gen-fixture", "--out", str(tmp_path), "--quiet"], capsys)
    assert code == 0
    assert (tmp_path / "feederA-synth.csv").read_bytes() == (DATA_DIR / "feederA-synth.csv").read_bytes()


def test_missing_model_exits_one_naming_path(tmp_path, capsys):
    missing = tmp_path / "nope.json"
    code, _, err = run(["simulate", str(missing)], capsys)
    assert code == 1
    assert err.startswith("error:") and str(missing) in err
    assert len(err.strip().splitlines()) == 1


def test_missing_dataset_exits_one(tmp_path, capsys):
    code, _, err = run(["ingest", str(tmp_path / "absent.csv")], capsys)
    assert code == 1 and "absent.csv" in err


def test_unknown_flag_exits_two(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["powerflow", FIXTURE, "--bogus"])
    assert exc.value.code == 2


def test_conflicting_flags_exit_two(capsys):
    code, _, _ = run(["simulate", "builtin:O", "--scenario", "S1", "--grid", "g.json"], capsys)
    assert code == 2
    code, _, _ = run(["simulate", "builtin:O", "--workers", "0"], capsys)
    assert code == 2


def test_flags_override_config_which_overrides_defaults(tmp_path, capsys):
    cfg = tmp_path / "cfg.toml"
    cfg.write_text("[powerflow]\nhead_v = 1.0\n")
    run(["powerflow", FIXTURE, "--config", str(cfg), "--out", str(tmp_path / "a.json")], capsys)
    run(["powerflow", FIXTURE, "--config", str(cfg), "--head-v", "1.03", "--out", str(tmp_path / "b.json")], capsys)
    run(["powerflow", FIXTURE, "--out", str(tmp_path / "c.json")], capsys)
    heads = [json.loads((tmp_path / f"{x}.json").read_text())["head_voltage_pu"] for x in "abc"]
    assert heads == pytest.approx([1.0, 1.03, 1.02])


def test_json_config_and_bad_config(tmp_path, capsys):
    good = tmp_path / "cfg.json"
    good.write_text(json.dumps({"scenario": {"t_end_ms": 300.0}, "dynamics": {"sphim": {"v_stall": 0.55}}}))
    assert load_config(good)["scenario"]["t_end_ms"] == 300.0
    code, _, err = run(["simulate", "builtin:O", "--scenario", "S3", "--config", str(good), "--out", str(tmp_path)], capsys)
    assert code == 0, err
    bad = tmp_path / "bad.toml"
    bad.write_text("[mystery]\nx = 1\n")
    code, _, err = run(["powerflow", FIXTURE, "--config", str(bad)], capsys)
    assert code == 1 and "mystery" in err
    neg = tmp_path / "neg.toml"
    neg.write_text("[powerflow]\ntol = -1\n")
    code, _, err = run(["powerflow", FIXTURE, "--config", str(neg)], capsys)
    assert code == 1 and "tol" in err


def test_report_labels_and_missing_values():
    m = EventMetrics("noAffect", None, None, None, None, 0, (0, 0, 0), "S3", "feeder-M")
    assert report_label(m) == "M/3"
    row = render_table([m]).splitlines()[-1]
    assert row == "| M/3 | noAffect | - | - | - | - | 0 | {0,0,0} |"
