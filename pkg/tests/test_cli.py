import json

import pytest

from mrcouple import cli


MINIMAL = {
    "geometry": {"nx": 4, "ny": 4},
    "problem": {"nu": [1.0, 0.5], "B": [[1.0, -1.0], [-1.0, 1.0]], "initial": "bump"},
    "scheme": {"name": "crank-nicolson"},
    "window": {"t_f": 0.2, "N": 2, "M1": 2, "M2": 3, "r1": 1, "r2": 1},
}


def write_config(tmp_path, payload, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(payload))
    return path


class TestParseConfig:
    def test_minimal_valid(self):
        cfg = cli.parse_config(json.dumps(MINIMAL))
        assert cfg.scheme.name == "crank-nicolson"
        assert cfg.quadrature == "trapezoid"
        assert cfg.window.M == (2, 3)

    def test_zero_substeps_names_field(self):
        payload = json.loads(json.dumps(MINIMAL))
        payload["window"]["M1"] = 0
        with pytest.raises(cli.ConfigError) as err:
            cli.parse_config(json.dumps(payload))
        assert any("window" in p for p in err.value.problems)

    def test_repeated_nodes_rejected_via_side_condition_check(self):
        payload = json.loads(json.dumps(MINIMAL))
        payload["scheme"] = {
            "name": "dg", "q": 2, "n_s": 2, "k_s": 1,
            "thetas": [0.5, 0.5], "D": [[0.0, 1.0], [1.0, 0.0]],
        }
        with pytest.raises(cli.ConfigError) as err:
            cli.parse_config(json.dumps(payload))
        assert any("side-condition" in p for p in err.value.problems)

    def test_unknown_keys_rejected(self):
        payload = json.loads(json.dumps(MINIMAL))
        payload["window"]["dt"] = 0.1
        payload["extra"] = 1
        with pytest.raises(cli.ConfigError) as err:
            cli.parse_config(json.dumps(payload))
        problems = "\n".join(err.value.problems)
        assert "window.dt" in problems and "extra" in problems

    def test_all_errors_reported_together(self):
        payload = {
            "problem": {"nu": [0.0, -1.0]},
            "window": {"N": 0},
            "scheme": {"name": "unknown-scheme"},
        }
        with pytest.raises(cli.ConfigError) as err:
            cli.parse_config(json.dumps(payload))
        assert len(err.value.problems) >= 3

    def test_invalid_json(self):
        with pytest.raises(cli.ConfigError, match="invalid JSON"):
            cli.parse_config("{not json")

    def test_custom_dg_scheme(self):
        payload = json.loads(json.dumps(MINIMAL))
        payload["scheme"] = {"name": "dg", "q": 2}
        cfg = cli.parse_config(json.dumps(payload))
        assert cfg.scheme.q == 2 and cfg.scheme.n_s == 0
        assert cfg.quadrature == "exact"

    def test_mms_forcing_accepted(self):
        payload = json.loads(json.dumps(MINIMAL))
        payload["problem"]["forcing"] = "mms:smooth"
        cfg = cli.parse_config(json.dumps(payload))
        assert cfg.problem["forcing"] == "mms:smooth"

    def test_unknown_mms_rejected(self):
        payload = json.loads(json.dumps(MINIMAL))
        payload["problem"]["forcing"] = "mms:bogus"
        with pytest.raises(cli.ConfigError):
            cli.parse_config(json.dumps(payload))

    def test_advection_preset_parsing(self):
        payload = json.loads(json.dumps(MINIMAL))
        payload["problem"]["advection"] = {"preset": "vortex", "amplitude": 0.5}
        cfg = cli.parse_config(json.dumps(payload))
        assert cfg.problem["advection"][0].kind == "vortex"


class TestMainRun:
    def test_run_writes_outputs(self, tmp_path):
        config = write_config(tmp_path, MINIMAL)
        out = tmp_path / "out"
        assert cli.main(["run", "--config", str(config), "--out", str(out)]) == 0
        csv = (out / "trajectory.csv").read_text()
        assert csv.splitlines()[0].startswith("window,t_sync")
        summary = json.loads((out / "summary.json").read_text())
        assert summary["windows"] == 2
        assert summary["d_gamma"] == 3

    def test_run_deterministic(self, tmp_path):
        config = write_config(tmp_path, MINIMAL)
        outputs = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert cli.main(["run", "--config", str(config), "--out", str(out)]) == 0
            outputs.append((out / "trajectory.csv").read_bytes())
        assert outputs[0] == outputs[1]

    def test_missing_config_is_config_error(self, tmp_path):
        assert cli.main(["run", "--config", str(tmp_path / "none.json")]) == 2

    def test_malformed_config_is_config_error(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{")
        assert cli.main(["run", "--config", str(path)]) == 2


class TestMainConvergence:
    def test_writes_rate_table(self, tmp_path):
        payload = json.loads(json.dumps(MINIMAL))
        payload["window"] = {"t_f": 0.5, "N": 2, "M1": 1, "M2": 2, "r1": 1, "r2": 1}
        payload["problem"]["forcing"] = "mms:smooth"
        payload["experiment"] = {"kind": "convergence", "levels": 3, "oracle_steps": 512}
        config = write_config(tmp_path, payload)
        out = tmp_path / "conv"
        assert cli.main(["convergence", "--config", str(config), "--out", str(out)]) == 0
        lines = (out / "rates.csv").read_text().strip().splitlines()
        assert lines[0] == "level,dt,dt1,dt2,err_l2_u1,err_l2_u2,err_sync,rate_running"
        assert len(lines) == 4

    def test_too_few_levels(self, tmp_path):
        config = write_config(tmp_path, MINIMAL)
        assert cli.main(["convergence", "--config", str(config), "--levels", "2"]) == 2

    def test_parallel_levels_match_sequential(self, tmp_path):
        payload = json.loads(json.dumps(MINIMAL))
        payload["window"] = {"t_f": 0.5, "N": 2, "M1": 1, "M2": 2, "r1": 1, "r2": 1}
        payload["problem"]["forcing"] = "mms:smooth"
        payload["experiment"] = {
            "kind": "convergence", "levels": 3, "oracle_steps": 256, "spin_up": 0.1,
        }
        config = write_config(tmp_path, payload)
        outputs = []
        for jobs, name in ((1, "seq"), (2, "par")):
            out = tmp_path / name
            rc = cli.main(
                ["convergence", "--config", str(config), "--out", str(out), "--jobs", str(jobs)]
            )
            assert rc == 0
            outputs.append((out / "rates.csv").read_bytes())
        assert outputs[0] == outputs[1]


class TestMainCheck:
    def test_conservation_passes(self, tmp_path):
        config = write_config(tmp_path, MINIMAL)
        assert cli.main(["check", "--config", str(config), "--suite", "conservation"]) == 0

    def test_conservation_rejects_incompatible_coupling(self, tmp_path):
        payload = json.loads(json.dumps(MINIMAL))
        payload["problem"]["B"] = [[1.0, 0.0], [1.0, 0.0]]
        config = write_config(tmp_path, payload)
        assert cli.main(["check", "--config", str(config), "--suite", "conservation"]) == 2

    def test_energy_passes(self, tmp_path):
        config = write_config(tmp_path, MINIMAL)
        assert cli.main(["check", "--config", str(config), "--suite", "energy"]) == 0

    def test_energy_rejects_forced_runs(self, tmp_path):
        payload = json.loads(json.dumps(MINIMAL))
        payload["problem"]["forcing"] = "pulse"
        config = write_config(tmp_path, payload)
        assert cli.main(["check", "--config", str(config), "--suite", "energy"]) == 2
