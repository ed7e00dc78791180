from __future__ import annotations

import csv
import json

import numpy as np

from emeq.cli import main
from emeq.reporting import config_digest

MERTON = {
    "family": "RDUT", "mu": 0.2, "sigma": 0.3, "alpha": 1.0,
    "w": "identity", "T": 1, "n_steps": 100, "seed": 7,
}
MES = {
    "family": "MeanES", "mu": 0.2, "sigma": 0.3, "gamma": 0.5,
    "alpha0": 0.05, "floor": 0, "T": 1, "n_steps": 50,
}
MV = {
    "family": "NonlinearExpectation", "instance": "mean_variance",
    "mu": 0.2, "sigma": 0.3, "gamma": 1.0, "T": 1, "n_steps": 100,
}


def write_config(tmp_path, name, payload):
    path = tmp_path / name
    path.write_text(json.dumps(payload))
    return str(path)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestSolve:
    def test_merton_profile(self, tmp_path, capsys):
        cfg = write_config(tmp_path, "m.json", MERTON)
        out = tmp_path / "profile.csv"
        assert main(["solve", "--config", cfg, "--out", str(out)]) == 0
        rows = read_csv(out)
        thetas = np.array([float(r["theta"]) for r in rows])
        assert np.max(np.abs(thetas - 0.2 / 0.09)) < 1e-5
        assert (tmp_path / "profile.png").exists()
        manifest = json.loads((tmp_path / "profile.csv.manifest.json").read_text())
        assert manifest["command"] == "solve"
        assert manifest["config_digest"] == config_digest(MERTON)

    def test_no_plot(self, tmp_path):
        cfg = write_config(tmp_path, "m.json", MERTON)
        out = tmp_path / "p.csv"
        assert main(["solve", "--config", cfg, "--out", str(out), "--no-plot"]) == 0
        assert not (tmp_path / "p.png").exists()

    def test_mes_zero_branch_exit_two(self, tmp_path, capsys):
        cfg = write_config(tmp_path, "mes.json", MES)
        out = tmp_path / "mes.csv"
        assert main(["solve", "--config", cfg, "--out", str(out)]) == 2
        err = capsys.readouterr().err
        assert "zero" in err and "proportional" in err
        assert not out.exists()

    def test_malformed_json_line_number(self, tmp_path, capsys):
        path = tmp_path / "bad.json"
        path.write_text('{"family": "RDUT",\n  "mu": oops}\n')
        assert main(["solve", "--config", str(path), "--out", str(tmp_path / "x.csv")]) == 1
        assert "line 2" in capsys.readouterr().err

    def test_schema_error(self, tmp_path, capsys):
        cfg = write_config(tmp_path, "b.json", {"family": "RDUT", "mu": 0.2, "T": 1})
        assert main(["solve", "--config", cfg, "--out", str(tmp_path / "x.csv")]) == 1
        assert "sigma" in capsys.readouterr().err

    def test_digest_key_order_invariant(self):
        shuffled = dict(reversed(list(MERTON.items())))
        assert config_digest(shuffled) == config_digest(MERTON)


class TestVerify:
    def test_solved_profile_passes(self, tmp_path):
        cfg = write_config(tmp_path, "m.json", MERTON)
        out = tmp_path / "profile.csv"
        main(["solve", "--config", cfg, "--out", str(out)])
        rep = tmp_path / "verification.csv"
        code = main(
            ["verify", "--config", cfg, "--profile", str(out), "--out", str(rep),
             "--tol", "1e-6"]
        )
        assert code == 0
        assert {"t", "x", "u", "operator_value"} <= set(read_csv(rep)[0].keys())

    def test_perturbed_profile_exit_three(self, tmp_path, capsys):
        cfg = write_config(tmp_path, "m.json", MERTON)
        out = tmp_path / "profile.csv"
        main(["solve", "--config", cfg, "--out", str(out)])
        rows = read_csv(out)
        bad = tmp_path / "bad.csv"
        with open(bad, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", "theta", "lambda", "Lambda", "valid"])
            for r in rows:
                writer.writerow(
                    [r["t"], repr(float(r["theta"]) + 0.5), r["lambda"],
                     r["Lambda"], r["valid"]]
                )
        code = main(
            ["verify", "--config", cfg, "--profile", str(bad),
             "--out", str(tmp_path / "v.csv"), "--tol", "1e-6"]
        )
        assert code == 3
        assert "FAILED" in capsys.readouterr().err

    def test_mc_cross_check_columns(self, tmp_path):
        cfg = write_config(tmp_path, "mv.json", MV)
        out = tmp_path / "profile.csv"
        main(["iterate", "--config", cfg, "--out", str(out)])
        rep = tmp_path / "v.csv"
        code = main(
            ["verify", "--config", cfg, "--profile", str(out), "--out", str(rep),
             "--mc", "--mc-cells", "2", "--paths", "4000"]
        )
        assert code == 0
        rows = read_csv(rep)
        assert "mc_estimate" in rows[0]
        assert any(r["mc_estimate"] != "" for r in rows)


class TestIterateAndSimulate:
    def test_iterate_trace(self, tmp_path, capsys):
        cfg = write_config(tmp_path, "mv.json", MV)
        out = tmp_path / "it.csv"
        assert main(["iterate", "--config", cfg, "--out", str(out), "--theta0", "0"]) == 0
        captured = capsys.readouterr().out
        assert "iter" in captured
        thetas = np.array([float(r["theta"]) for r in read_csv(out)])
        assert np.max(np.abs(thetas - 0.2 / 0.09)) < 1e-6

    def test_simulate_reproducible_and_worker_invariant(self, tmp_path):
        cfg = write_config(tmp_path, "m.json", MERTON)
        outs = []
        for tag, workers in (("a", "1"), ("b", "4"), ("c", "1")):
            out = tmp_path / f"s_{tag}.csv"
            code = main(
                ["simulate", "--config", cfg, "--paths", "20000", "--seed", "7",
                 "--theta", "1.0", "--out", str(out), "--workers", workers,
                 "--no-plot"]
            )
            assert code == 0
            outs.append(out.read_bytes())
        assert outs[0] == outs[1] == outs[2]

    def test_solve_worker_invariant(self, tmp_path):
        cfg = write_config(tmp_path, "m.json", MERTON)
        blobs = []
        for tag, workers in (("x", "1"), ("y", "4")):
            out = tmp_path / f"p_{tag}.csv"
            assert main(
                ["solve", "--config", cfg, "--out", str(out), "--workers", workers,
                 "--no-plot"]
            ) == 0
            blobs.append(out.read_bytes())
        assert blobs[0] == blobs[1]

    def test_manifest_differs_only_in_timestamps(self, tmp_path):
        cfg = write_config(tmp_path, "m.json", MERTON)
        manifests = []
        for tag in ("a", "b"):
            out = tmp_path / f"r_{tag}.csv"
            main(["simulate", "--config", cfg, "--paths", "5000", "--seed", "3",
                  "--theta", "1.0", "--out", str(out), "--no-plot"])
            m = json.loads((tmp_path / f"r_{tag}.csv.manifest.json").read_text())
            manifests.append(m)
        for key in ("started_at", "finished_at", "outputs"):
            manifests[0].pop(key), manifests[1].pop(key)
        assert manifests[0] == manifests[1]

    def test_diagnostics_json(self, tmp_path):
        cfg = write_config(tmp_path, "m.json", MERTON)
        out = tmp_path / "d.json"
        code = main(
            ["diagnostics", "--config", cfg, "--paths", "2000", "--theta", "1.0",
             "--out", str(out), "--no-plot"]
        )
        assert code == 0
        report = json.loads(out.read_text())
        assert "flow_property_w2_defect" in report
