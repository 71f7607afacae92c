import json

import numpy as np
import pytest

import hamflow as hf
from hamflow.cli import main
from hamflow.serialize import dump_canonical


def write_config(tmp_path, payload, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(payload))
    return str(path)


def scalar_manifold_config(tmp_path, out):
    return write_config(tmp_path, {
        "system": {"name": "scalar"},
        "manifold": {
            "extend_time": 12.0,
            "bounds": {"x_min": [-3.0], "x_max": [0.99]},
            "query_grid": [[-2.0], [0.9], [1.1]],
        },
        "output": {"dir": str(out)},
    })


class TestConfig:
    def test_missing_file_exit_2(self, capsys):
        assert main(["inspect", "--config", "/no/such/file.json"]) == 2
        assert "config error" in capsys.readouterr().err

    def test_malformed_json_diagnostics(self, tmp_path, capsys):
        path = tmp_path / "bad.json"
        path.write_text('{"system": }')
        assert main(["inspect", "--config", str(path)]) == 2
        err = capsys.readouterr().err
        assert "line" in err

    def test_unknown_system_exit_2(self, tmp_path):
        cfg = write_config(tmp_path, {"system": {"name": "ghost"}})
        assert main(["inspect", "--config", cfg]) == 2

    def test_bad_tolerance_field(self, tmp_path, capsys):
        cfg = write_config(tmp_path, {
            "system": {"name": "scalar"},
            "tolerances": {"warp": 1e-9},
        })
        assert main(["inspect", "--config", cfg]) == 2
        assert "tolerances.warp" in capsys.readouterr().err

    def test_empty_horizons_exit_2(self, tmp_path):
        cfg = write_config(tmp_path, {
            "system": {"name": "scalar"},
            "turnpike": {"x0": [0.5], "xf": [0.0], "horizons": []},
        })
        assert main(["turnpike", "--config", cfg]) == 2


class TestInspect:
    def test_generator_dashboard(self, tmp_path, capsys):
        out = tmp_path / "out"
        cfg = write_config(tmp_path, {
            "system": {"name": "generator"},
            "output": {"dir": str(out)},
        })
        assert main(["inspect", "--config", cfg]) == 0
        report = json.loads((out / "inspect.json").read_text())
        assert report["route"] == "stabilizable"
        assert report["pbh"]["stabilizable"] is True
        assert report["pbh"]["detectable"] is True
        assert 0.8 <= report["growth"]["f_exponent"] <= 1.2

    def test_scalar_routes_through_stable_dynamics(self, tmp_path):
        out = tmp_path / "out"
        cfg = write_config(tmp_path, {
            "system": {"name": "scalar"},
            "output": {"dir": str(out)},
        })
        assert main(["inspect", "--config", cfg]) == 0
        report = json.loads((out / "inspect.json").read_text())
        # rank-0 penalty: the detectability hypothesis fails and the stable
        # free-dynamics route applies instead
        assert report["pbh"]["penalty_rank"] == 0
        assert report["pbh"]["penalty_detectability"] is False
        assert report["linearization"]["A_hurwitz"] is True
        assert report["route"] == "stable"

    def test_expression_system_config(self, tmp_path):
        out = tmp_path / "out"
        cfg = write_config(tmp_path, {
            "system": {"expr": {
                "n": 1, "m": 1, "f": ["-x1 + x1^2"], "g": [["1"]], "h": "0"}},
            "output": {"dir": str(out)},
        })
        assert main(["inspect", "--config", cfg]) == 0


class TestManifoldCommand:
    def test_scalar_coverage_statuses(self, tmp_path):
        out = tmp_path / "out"
        cfg = scalar_manifold_config(tmp_path, out)
        assert main(["manifold", "--config", cfg, "--quiet"]) == 0
        cov = json.loads((out / "coverage.json").read_text())
        statuses = {tuple(e["x0"]): e["status"]
                    for e in cov["coverage"]["entries"]}
        assert statuses[(-2.0,)] == "covered"
        assert statuses[(0.9,)] == "covered"
        assert statuses[(1.1,)] == "uncovered"
        assert (out / "chart_stable.json").exists()
        assert (out / "chart_stable_points.csv").exists()

    def test_chart_file_round_trips(self, tmp_path):
        out = tmp_path / "out"
        cfg = scalar_manifold_config(tmp_path, out)
        assert main(["manifold", "--config", cfg, "--quiet"]) == 0
        chart = hf.load_chart(out / "chart_stable.json")
        assert chart.kind == "stable"
        assert len(chart.xs) > 50
        assert np.abs(chart.ps).max() <= 1e-8

    def test_gate_requires_force(self, tmp_path, capsys):
        # superquadratic drift violates the growth hypotheses (route none)
        # even though the linear part is perfectly well posed
        out = tmp_path / "out"
        cfg = write_config(tmp_path, {
            "system": {"expr": {
                "n": 1, "m": 1, "f": ["x1 + x1^5"], "g": [["1"]],
                "h": "x1^2/2"}},
            "manifold": {"extend_time": 0.5, "seed_radius": 0.1},
            "output": {"dir": str(out)},
        })
        assert main(["manifold", "--config", cfg, "--quiet"]) == 3
        assert "--force" in capsys.readouterr().err
        assert main(["manifold", "--config", cfg, "--quiet", "--force"]) == 0


class TestTurnpikeCommand:
    def test_scalar_report(self, tmp_path):
        out = tmp_path / "out"
        cfg = write_config(tmp_path, {
            "system": {"name": "scalar"},
            "turnpike": {"x0": [0.5], "xf": [0.2],
                         "horizons": [4.0, 6.0], "epsilon": 0.1},
            "output": {"dir": str(out)},
        })
        assert main(["turnpike", "--config", cfg, "--quiet"]) == 0
        report = json.loads((out / "turnpike.json").read_text())
        assert all(e["converged"] for e in report["entries"])
        assert (out / "turnpike.csv").exists()
        assert (out / "trajectory_T4.csv").exists()
        traj = hf.read_trajectory_csv(out / "trajectory_T4.csv")
        assert traj.z.shape[1] == 2  # state and costate columns


class TestSimulateCommand:
    def test_lqr_cost(self, tmp_path):
        out = tmp_path / "out"
        cfg = write_config(tmp_path, {
            "system": {"expr": {
                "n": 1, "m": 1, "f": ["0*x1"], "g": [["1"]],
                "h": "x1^2/2"}},
            "simulate": {"feedback": "lqr", "x0": [1.0], "T": 25.0},
            "tolerances": {"integrator": 1e-10},
            "output": {"dir": str(out)},
        })
        assert main(["simulate", "--config", cfg, "--quiet"]) == 0
        data = json.loads((out / "simulate.json").read_text())
        assert data["cost"] == pytest.approx(0.5, abs=1e-6)

    def test_zero_feedback_decay(self, tmp_path):
        out = tmp_path / "out"
        cfg = write_config(tmp_path, {
            "system": {"name": "scalar"},
            "simulate": {"feedback": "zero", "x0": [0.5], "T": 10.0},
            "output": {"dir": str(out)},
        })
        assert main(["simulate", "--config", cfg, "--quiet"]) == 0
        traj = hf.read_trajectory_csv(out / "trajectory.csv")
        x_true = 0.5 * np.exp(-10.0) / (0.5 + 0.5 * np.exp(-10.0))
        assert traj.z[-1, 0] == pytest.approx(x_true, abs=1e-7)

    def test_manifold_feedback_at_origin(self, tmp_path):
        out = tmp_path / "out"
        cfg = write_config(tmp_path, {
            "system": {"name": "scalar"},
            "manifold": {"extend_time": 6.0,
                         "bounds": {"x_min": [-2.0], "x_max": [0.95]}},
            "simulate": {"feedback": "manifold", "x0": [0.0], "T": 2.0},
            "output": {"dir": str(out)},
        })
        assert main(["simulate", "--config", cfg, "--quiet"]) == 0
        traj = hf.read_trajectory_csv(out / "trajectory.csv")
        assert np.abs(traj.u).max() <= 1e-8


class TestDeterminism:
    def test_byte_identical_outputs(self, tmp_path):
        cfg = scalar_manifold_config(tmp_path, tmp_path / "ignored")
        outs = []
        for sub in ("a", "b"):
            out = tmp_path / sub
            assert main(["manifold", "--config", cfg, "--quiet",
                         "--out", str(out)]) == 0
            outs.append(out)
        for name in ("chart_stable.json", "coverage.json", "inspect.json",
                     "chart_stable_points.csv"):
            assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()


class TestCanonicalJson:
    def test_sorted_keys_and_float_format(self):
        s = dump_canonical({"b": 1.5, "a": [1, 2.0]})
        assert s.index('"a"') < s.index('"b"')
        assert "2.000000000000e+00" in s
        assert "1.500000000000e+00" in s

    def test_round_trips_through_json(self):
        payload = {"x": [1.0, -2.5e-12], "flag": True, "name": "s",
                   "none": None, "int": 7}
        back = json.loads(dump_canonical(payload))
        assert back["x"] == [1.0, -2.5e-12]
        assert back["flag"] is True
        assert back["int"] == 7

    def test_non_finite_floats(self):
        s = dump_canonical({"v": float("nan"), "w": float("inf")})
        back = json.loads(s)
        assert back["v"] == "nan" and back["w"] == "inf"
