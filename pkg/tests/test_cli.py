import json

import pytest

from psconfound import cli
from psconfound.estimators import Method
from psconfound.harness import CSV_HEADER, AnalysisOptions, CellSpec, emit_csv, run_grid
from psconfound.reference import Check, ReferenceError, verify

RUN = ["run", "--n", "1000", "--prevalence", "0.5", "--scenario", "1", "--reps", "100", "--seed", "42"]


@pytest.fixture(scope="module")
def run_csv(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert cli.main(RUN + ["--out", str(out)]) == cli.EXIT_OK
    return out / "results.csv"


def test_run_writes_five_method_rows(run_csv):
    lines = run_csv.read_text().splitlines()
    assert lines[0] == ",".join(CSV_HEADER)
    assert [line.split(",")[3] for line in lines[1:]] == [m.value for m in Method]


def test_run_is_deterministic(run_csv, tmp_path):
    assert cli.main(RUN + ["--out", str(tmp_path)]) == cli.EXIT_OK
    assert (tmp_path / "results.csv").read_bytes() == run_csv.read_bytes()


def test_cli_matches_library(run_csv, tmp_path):
    table = run_grid([CellSpec(1000, 0.5, 1, reps=100, base_seed=42)], options=AnalysisOptions())
    assert emit_csv(table, tmp_path / "lib.csv").read_bytes() == run_csv.read_bytes()


def test_invalid_scenario_is_usage_error(capsys):
    assert cli.main(["run", "--scenario", "9"]) == cli.EXIT_USAGE
    assert "invalid choice" in capsys.readouterr().err


def test_invalid_reps(tmp_path, capsys):
    assert cli.main(["run", "--reps", "0", "--out", str(tmp_path)]) == cli.EXIT_USAGE
    assert "reps" in capsys.readouterr().err


class TestConfig:
    def test_round_trip_fixed_point(self):
        cfg = cli.RunConfig(sizes=[100], prevalences=[0.1, 0.05], dgps=["cloglog_unmeasured"], reps=7)
        text = cfg.to_json()
        assert cli.RunConfig.from_json(text).to_json() == text

    def test_flags_override_file(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(cli.RunConfig(sizes=[100], reps=3, base_seed=1).to_json())
        args = cli._parser().parse_args(["run", "--config", str(path), "--seed", "9"])
        cfg = cli.build_config(args)
        assert (cfg.sizes, cfg.reps, cfg.base_seed) == ([100], 3, 9)

    def test_unknown_key(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"sizes": [100], "colour": "red"}))
        assert cli.main(["run", "--config", str(path)]) == cli.EXIT_USAGE

    def test_missing_config_file(self, tmp_path):
        assert cli.main(["run", "--config", str(tmp_path / "nope.json")]) == cli.EXIT_IO

    @pytest.mark.parametrize("bad", [dict(sizes=[]), dict(threads=0), dict(dgps=["probit"]),
                                     dict(power_rule="x"), dict(scenarios=[6])])
    def test_validation(self, bad):
        with pytest.raises(cli.ConfigError):
            cli.RunConfig(**bad).validate()

    def test_write_config_and_dump(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        data_path = tmp_path / "d.csv"
        code = cli.main(["run", "--n", "50", "--scenario", "2", "--write-config", str(cfg_path),
                         "--dump-dataset", str(data_path)])
        assert code == cli.EXIT_OK
        assert cli.RunConfig.from_json(cfg_path.read_text()).sizes == [50]
        assert data_path.read_text().splitlines()[0] == "e,x1,x2,x3,x4,x5,y"


class TestPlot:
    def test_six_svgs(self, run_csv, tmp_path):
        assert cli.main(["plot", str(run_csv), str(tmp_path)]) == cli.EXIT_OK
        assert len(list(tmp_path.glob("*.svg"))) == 6

    def test_all_na_cell_is_a_gap(self, run_csv, tmp_path):
        lines = run_csv.read_text().splitlines()
        rows = [line.split(",") for line in lines[1:]]
        for r in rows:
            r[5:13] = ["NA"] * 8
            r[4] = "10.0"
        na = tmp_path / "na.csv"
        na.write_text("\n".join([lines[0]] + [",".join(r) for r in rows]) + "\n")
        assert cli.main(["plot", str(na), str(tmp_path / "figs")]) == cli.EXIT_OK
        assert len(list((tmp_path / "figs").glob("*.svg"))) == 6

    def test_empty_body_is_error(self, tmp_path, capsys):
        path = tmp_path / "empty.csv"
        path.write_text(",".join(CSV_HEADER) + "\n")
        assert cli.main(["plot", str(path), str(tmp_path / "figs")]) == cli.EXIT_USAGE
        assert "no data rows" in capsys.readouterr().err
        assert not (tmp_path / "figs").exists()

    def test_malformed_row_reports_row_number(self, run_csv, tmp_path, capsys):
        lines = run_csv.read_text().splitlines()
        lines[4] = lines[4].replace("iptw", "iptw,extra")
        bad = tmp_path / "bad.csv"
        bad.write_text("\n".join(lines) + "\n")
        assert cli.main(["plot", str(bad), str(tmp_path)]) == cli.EXIT_USAGE
        assert "row 5" in capsys.readouterr().err

    def test_missing_csv_is_io_error(self, tmp_path):
        assert cli.main(["plot", str(tmp_path / "none.csv"), str(tmp_path)]) == cli.EXIT_IO


class TestVerify:
    def test_missing_reference_names_file(self, tmp_path, capsys):
        missing = tmp_path / "tables.csv"
        assert cli.main(["verify", "--reference", str(missing)]) == cli.EXIT_IO
        assert str(missing) in capsys.readouterr().err

    def test_missing_reference_library(self, tmp_path):
        with pytest.raises(ReferenceError, match="tables.csv"):
            verify(reference_path=tmp_path / "tables.csv")

    def test_zero_tolerance_fails(self):
        checks = (
            Check("2", 1000, 0.5, 1, Method.REGRESSION_STANDARDISED, "bias", "abs", 0.02),
            Check("2", 1000, 0.5, 1, Method.REGRESSION_STANDARDISED, "coverage_pct", "abs", 2.5),
        )
        report = verify(reps=20, checks=checks, tolerance=0.0)
        assert not report.passed
        assert all(r.tolerance == 0.0 for r in report.rows)
        loose = verify(reps=20, checks=checks, tolerance=100.0)
        assert loose.passed

    def test_report_lines(self, tmp_path):
        checks = (Check("5", 1000, 0.5, 1, Method.NN_MATCH, "coverage_pct", "abs", 0.0),)
        report = verify(reps=10, checks=checks)
        text = report.to_text()
        assert "[FAIL] crit 5" in text and "sandwich-after-matching" in text
        report.write_csv(tmp_path / "r.csv")
        assert (tmp_path / "r.csv").read_text().startswith("criterion,cell,method,metric")
