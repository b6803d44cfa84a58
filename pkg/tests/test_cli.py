import json

import pytest
from click.testing import CliRunner

from metasim.cli import main

DATA_CSV = """\
meta_id,study_id,events_trt,n_trt,events_ctl,n_ctl
demo,1,12,50,8,50
demo,2,30,120,22,120
demo,3,7,40,11,40
"""

SIM_CFG = {
    "measures": ["OR"],
    "designs": ["EQUAL"],
    "n": [100],
    "k": [2],
    "p0": [0.7],
    "i_squared": [0.25],
    "methods": ["NN-DL/WALD", "NN-DL/HKSJ"],
    "reps": 6,
    "seed": 5,
}


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def data_file(tmp_path):
    path = tmp_path / "data.csv"
    path.write_text(DATA_CSV)
    return str(path)


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(SIM_CFG))
    return str(path)


class TestAnalyze:
    def test_explicit_methods_to_stdout(self, runner, data_file):
        res = runner.invoke(
            main,
            ["analyze", "--data", data_file, "--measure", "or",
             "--methods", "NN-DL/WALD,NN-EB/HKSJ"],
        )
        assert res.exit_code == 0, res.output
        lines = res.output.strip().splitlines()
        assert lines[0].startswith("meta_id,k,measure,method")
        assert len(lines) == 3
        assert lines[1].split(",")[:5] == ["demo", "3", "OR", "NN-DL", "WALD"]

    def test_default_methods_cover_every_applicable_id(self, runner, data_file):
        res = runner.invoke(main, ["analyze", "--data", data_file, "--measure", "rr"])
        assert res.exit_code == 0, res.output
        lines = res.output.strip().splitlines()
        # RR excludes the four GLMM models (8 ids) from the 24 total
        assert len(lines) == 1 + 16
        assert not any("UM." in ln or "CM." in ln for ln in lines)
        assert any(ln.split(",")[3] == "PN-PL" for ln in lines[1:])

    def test_output_file(self, runner, data_file, tmp_path):
        out = tmp_path / "res.csv"
        res = runner.invoke(
            main,
            ["analyze", "--data", data_file, "--measure", "or",
             "--methods", "NN-DL/WALD", "--out", str(out)],
        )
        assert res.exit_code == 0, res.output
        assert out.read_text().startswith("meta_id,")

    def test_missing_file_usage_error(self, runner):
        res = runner.invoke(main, ["analyze", "--data", "/no/such.csv", "--measure", "or"])
        assert res.exit_code != 0

    def test_bad_method_id(self, runner, data_file):
        res = runner.invoke(
            main,
            ["analyze", "--data", data_file, "--measure", "or", "--methods", "NOPE"],
        )
        assert res.exit_code != 0
        assert "NOPE" in res.output

    def test_malformed_csv_reports_line(self, runner, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text(DATA_CSV.replace("30,120,22", "30,120,x"))
        res = runner.invoke(main, ["analyze", "--data", str(bad), "--measure", "or"])
        assert res.exit_code != 0
        assert "line 3" in res.output


class TestSimulate:
    def test_config_run(self, runner, config_file):
        res = runner.invoke(main, ["simulate", "--config", config_file])
        assert res.exit_code == 0, res.output
        lines = res.output.strip().splitlines()
        assert lines[0].startswith("measure,design,n,k,p0,i2,tau,method")
        assert len(lines) == 3
        assert lines[1].split(",")[0] == "OR"

    def test_cli_overrides_change_run(self, runner, config_file):
        base = runner.invoke(main, ["simulate", "--config", config_file])
        other = runner.invoke(
            main, ["simulate", "--config", config_file, "--seed", "99"]
        )
        assert base.exit_code == 0 and other.exit_code == 0
        assert base.output != other.output

    def test_worker_count_does_not_change_output(self, runner, config_file):
        seq = runner.invoke(
            main, ["simulate", "--config", config_file, "--workers", "1"]
        )
        par = runner.invoke(
            main, ["simulate", "--config", config_file, "--workers", "3"]
        )
        assert seq.exit_code == 0 and par.exit_code == 0
        assert seq.output == par.output

    def test_invalid_json_config(self, runner, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{not json")
        res = runner.invoke(main, ["simulate", "--config", str(path)])
        assert res.exit_code != 0
        assert "invalid JSON" in res.output

    def test_missing_config_field(self, runner, tmp_path):
        path = tmp_path / "cfg.json"
        cfg = {k: v for k, v in SIM_CFG.items() if k != "methods"}
        path.write_text(json.dumps(cfg))
        res = runner.invoke(main, ["simulate", "--config", str(path)])
        assert res.exit_code != 0
        assert "methods" in res.output


class TestTauTable:
    def test_default_table(self, runner):
        res = runner.invoke(main, ["tau-table"])
        assert res.exit_code == 0, res.output
        lines = res.output.strip().splitlines()
        assert lines[0] == "k,measure,design,i2,tau"
        assert len(lines) == 1 + 72

    def test_parameters_change_values(self, runner):
        a = runner.invoke(main, ["tau-table", "--n", "100"])
        b = runner.invoke(main, ["tau-table", "--n", "25"])
        assert a.output != b.output

    def test_bad_p0(self, runner):
        res = runner.invoke(main, ["tau-table", "--p0", "1.5"])
        assert res.exit_code != 0


class TestServerMode:
    def test_server_flag_hits_http(self, runner, monkeypatch):
        calls = {}

        def fake_get(server, path, params):
            calls["url"] = (server, path, params)
            return {
                "n": 100,
                "p0": 0.7,
                "rows": [
                    {"k": 2, "measure": "OR", "design": "EQUAL",
                     "i_squared": 0.25, "tau": 0.1781}
                ],
            }

        monkeypatch.setattr("metasim.cli._http_get", fake_get)
        res = runner.invoke(main, ["--server", "http://x:1", "tau-table"])
        assert res.exit_code == 0, res.output
        assert calls["url"][0] == "http://x:1"
        assert res.output.strip().splitlines()[1].startswith("2,OR,EQUAL")
