import csv
import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from gridswitch import cli, harness
from gridswitch.errors import ConfigError
from gridswitch.scenario import load_scenario, parse_scenario, shipped_scenarios, sub_seed

GOLDEN = Path(__file__).parent / "golden"


def _small(sc, size=600, epochs=15):
    sc.dataset = dict(sc.dataset, size=size)
    sc.estimator = replace(sc.estimator, max_epochs=epochs)
    return sc


# -- scenarios ----------------------------------------------------------------

def test_shipped_scenarios_present():
    assert set(shipped_scenarios()) >= {"fourdg_base", "fourdg_fdi", "fourdg_mitm",
                                        "tendg_base", "tendg_fdi", "tendg_mitm",
                                        "tendg_combined"}


@pytest.mark.parametrize("name", shipped_scenarios())
def test_every_shipped_scenario_loads(name):
    sc = load_scenario(name)
    assert sc.grid.n == sc.comm.n and sc.t_a < sc.grid.t_total
    assert sc.trees[0] == sc.default_tree
    assert harness.resolve_model(sc.model).exists()
    doc = sc.explicit()
    assert doc["grid"]["dt"] == 1e-3 and doc["control"] == {"k1": 40.0, "k2": 20.0}


def test_fourdg_fdi_contents():
    sc = load_scenario("fourdg_fdi")
    assert sc.n == 4 and sc.t_a == 5.0
    assert {a.target for a in sc.attacks} == {0, 1, 2}
    assert all(a.kind == "FDI" for a in sc.attacks)


def test_fourdg_mitm_contents():
    sc = load_scenario("fourdg_mitm")
    assert {a.target for a in sc.attacks} == {(1, 2), (2, 3)}
    assert not sc.assertions["mitigated"].get("no_triggers")


def _doc(**over):
    doc = {"grid": {"n": 3}, "comm": {"n": 3}, "schedule": {"t_a": 5.0, "t_total": 10.0}}
    for k, v in over.items():
        doc[k] = v
    return doc


def test_inconsistent_n_names_both_fields():
    with pytest.raises(ConfigError) as exc:
        parse_scenario(_doc(comm={"n": 4}))
    assert "grid.n" in str(exc.value) and "comm.n" in str(exc.value)


def test_attack_after_horizon_rejected():
    with pytest.raises(ConfigError, match="t_a"):
        parse_scenario(_doc(schedule={"t_a": 10.0, "t_total": 10.0}))


def test_bad_fields_are_named():
    with pytest.raises(ConfigError, match="attacks\\[0\\].kind"):
        parse_scenario(_doc(attacks=[{"kind": "DOS", "target": 1}]))
    with pytest.raises(ConfigError, match="outside 1..3"):
        parse_scenario(_doc(attacks=[{"kind": "FDI", "target": 4}]))
    with pytest.raises(ConfigError, match="unknown checks"):
        parse_scenario(_doc(assertions={"mitigated": {"max_nonsense": 1}}))
    with pytest.raises(ConfigError, match="grid.load_p"):
        parse_scenario(_doc(grid={"n": 3, "load_p": [1.0, 2.0]}))


def test_yaml_error_reports_line(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("grid:\n  n: 4\n  lines: [1, 2\n")
    with pytest.raises(ConfigError, match="line"):
        load_scenario(p)


def test_extends_relative_file(tmp_path):
    (tmp_path / "child.yaml").write_text("extends: fourdg_base\nname: child\n"
                                         "schedule: {t_a: 4.0}\n")
    sc = load_scenario(tmp_path / "child.yaml")
    assert sc.name == "child" and sc.t_a == 4.0 and sc.grid.t_total == 10.0


def test_defaults_are_explicit():
    sc = parse_scenario(_doc())
    doc = sc.explicit()
    assert doc["comm"]["links"] == [[1, 2], [1, 3], [2, 3]]
    assert doc["engine"]["hold"] == 0.1 and doc["noise"]["snr_db"] == float("inf")
    assert doc["trees"]["cap"] == 100_000


def test_sub_seeds():
    assert sub_seed(1, "noise") == sub_seed(1, "noise")
    assert len({sub_seed(1, k) for k in ("sim", "attack", "noise", "init", "split")}) == 5
    assert sub_seed(1, "noise") != sub_seed(2, "noise")


# -- enumerate ----------------------------------------------------------------

@pytest.mark.parametrize("spec, root, count", [("complete:4", 1, 16), ("ring:4", 1, 4),
                                               ("complete:1", None, 1)])
def test_enumerate_examples(spec, root, count):
    assert harness.enumerate_graph(spec, root)["count"] == count


def test_enumerate_dump(tmp_path, capsys):
    dump = tmp_path / "trees.json"
    assert cli.main(["enumerate", "ring:4", "--root", "2", "--dump", str(dump)]) == 0
    assert json.loads(capsys.readouterr().out)["count"] == 4
    assert json.loads(dump.read_text())["count"] == 4


def test_enumerate_cap_exceeded(capsys):
    assert cli.main(["enumerate", "complete:6", "--cap", "50"]) == cli.EXIT_ENGINE
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "CapExceeded" and "50" in err["message"]


def test_config_error_exit_code(capsys):
    assert cli.main(["run-case", "no_such_scenario"]) == cli.EXIT_CONFIG
    assert json.loads(capsys.readouterr().err)["error"] == "ConfigError"


# -- case runs ----------------------------------------------------------------

def test_run_case_report_and_csv(tmp_path, capsys):
    code = cli.main(["run-case", "fourdg_fdi", "--out-dir", str(tmp_path)])
    report = json.loads(capsys.readouterr().out)
    assert code == 0 and report["passed"]
    assert report["decisions"][0]["tree"] == {"root": 4, "edges": [[4, 1], [4, 2], [4, 3]]}
    rows = list(csv.reader(open(tmp_path / "fourdg_fdi_trajectory.csv")))
    assert rows[0][-1] == "active_tree_index" and rows[0][0] == "t"
    assert Path(report["trajectory_csv"]).exists()
    saved = json.loads((tmp_path / "fourdg_fdi_report.json").read_text())
    assert saved["digest"] == report["digest"]


def test_run_case_without_mitigation(tmp_path, capsys):
    code = cli.main(["run-case", "fourdg_fdi", "--no-mitigation", "--analytic",
                     "--out-dir", str(tmp_path)])
    report = json.loads(capsys.readouterr().out)
    assert code == 0 and report["residuals"]["freq_err"] > 0.1
    assert report["decisions"] == [] and report["detector"] == "analytic"


def test_failed_assertions_give_exit_code_1(tmp_path, capsys):
    p = tmp_path / "strict.yaml"
    p.write_text("extends: fourdg_base\nname: strict\nschedule: {t_a: 3.0, t_total: 3.5}\n"
                 "assertions: {mitigated: {max_final_freq_err: 1.0e-12}}\n")
    assert cli.main(["run-case", str(p), "--analytic", "--out-dir", str(tmp_path)]) == 1


def test_simulate_command(tmp_path, capsys):
    p = tmp_path / "short.yaml"
    p.write_text("extends: fourdg_base\nname: short\nschedule: {t_a: 0.5, t_total: 1.0}\n")
    assert cli.main(["simulate", str(p), "--out-dir", str(tmp_path)]) == 0
    assert json.loads(capsys.readouterr().out)["samples"] == 1001
    assert (tmp_path / "short_simulation.csv").exists()


# -- data, training, tables ---------------------------------------------------

def test_gen_train_evaluate_round_trip(tmp_path, capsys):
    data, model = tmp_path / "d.csv", tmp_path / "m.json"
    assert cli.main(["gen-data", "fourdg_base", "--size", "13000", "-o", str(data)]) == 0
    capsys.readouterr()
    p = tmp_path / "quick.yaml"
    p.write_text("extends: fourdg_base\nname: quick\nestimator: {max_epochs: 5}\n")
    assert cli.main(["train", str(p), "--data", str(data), "-o", str(model)]) == 0
    capsys.readouterr()
    info = json.loads(model.read_text())
    assert info["sigma"] > 0 and info["n"] == 4 and info["k1"] == 40.0
    assert cli.main(["evaluate", str(model), str(data)]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["rows"] == 13000 and out["rmse"] ** 2 == pytest.approx(out["mse"])


def test_evaluate_shape_mismatch(tmp_path, capsys):
    data = tmp_path / "d.csv"
    cli.main(["gen-data", "fourdg_base", "--size", "50", "-o", str(data)])
    capsys.readouterr()
    assert cli.main(["evaluate", "tendg", str(data)]) == cli.EXIT_CONFIG


def test_pipeline_table_schema_matches_golden(tmp_path):
    sc = _small(load_scenario("fourdg_base"))
    rows = harness.pipeline(sc, snr_list=[float("inf"), 75.0, 40.0], out_dir=tmp_path)
    assert len(rows) == 3
    text = (tmp_path / "fourdg_base_table.csv").read_text().splitlines()
    assert text[0] == (GOLDEN / "pipeline_header.csv").read_text().strip()
    assert [r.split(",")[1] for r in text[1:]] == ["inf", "75.0", "40.0"]
    for r in rows:
        assert r["status"] == "ok"
        assert all(np.isfinite(r[c]) for c in harness.TABLE_COLUMNS[2:11])
    doc = json.loads((tmp_path / "fourdg_base_table.json").read_text())
    assert doc["columns"] == harness.TABLE_COLUMNS and doc["rows"][0]["snr_db"] == "inf"


def test_pipeline_bit_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        harness.pipeline(_small(load_scenario("fourdg_base")), snr_list=[40.0], out_dir=out)
    assert (a / "fourdg_base_table.csv").read_bytes() == (b / "fourdg_base_table.csv").read_bytes()


def test_pipeline_records_divergence(monkeypatch, tmp_path):
    from gridswitch.errors import DivergenceError

    def boom(*a, **k):
        raise DivergenceError("non-finite training loss", epoch=3)

    monkeypatch.setattr(harness, "train", boom)
    rows = harness.pipeline(_small(load_scenario("fourdg_base"), size=100),
                            snr_list=[float("inf"), 40.0], out_dir=tmp_path)
    assert [r["status"] for r in rows] == ["diverged", "diverged"]
    assert rows[0]["epochs"] == 3 and np.isnan(rows[0]["test_mae"])
