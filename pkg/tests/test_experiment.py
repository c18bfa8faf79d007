import json
import os

import numpy as np
import pytest

from hiddenbsde import experiment
from hiddenbsde.cli import cli_main
from hiddenbsde.model import (ExperimentConfig, PdeGridSpec, ProblemFunctions,
                              SquareTerminal, ZeroDriver, canonical_model,
                              load_config_file)
from hiddenbsde.simulate import NoiseBundle, forward_values


def small_config(eps=0.05, replicates=20, seed=404, dt=2e-4):
    return ExperimentConfig(
        model=canonical_model(eps),
        problem=ProblemFunctions(driver=ZeroDriver(), terminal=SquareTerminal(),
                                 growth_p=2.0),
        grid_dt=dt,
        pde_grid=PdeGridSpec(n_y=121, n_t=100),
        theta_grid_n=21,
        mc_replicates=replicates,
        seed=seed,
        theta_true=1.0,
    )


CONFIG_TEXT = """
[model]
a = 1.0
b = { kind = "theta" }
f = 1.0
sigma = 1.0
theta_lo = 0.5
theta_hi = 2.0
T = 1.0
tau = 0.25
epsilon = 0.05
y0 = 0.0

[problem]
driver = { kind = "zero" }
terminal = { kind = "square" }
growth_p = 2.0

[experiment]
grid_dt = 2e-4
theta_grid_n = 21
mc_replicates = 8
seed = 11
theta_true = 1.0

[experiment.pde_grid]
n_y = 81
n_t = 60
"""


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "small.toml"
    path.write_text(CONFIG_TEXT)
    return str(path)


class TestSuites:
    def test_unknown_suite_rejected(self):
        from hiddenbsde.model import ConfigError
        with pytest.raises(ConfigError, match="unknown suite"):
            experiment.run_experiment(small_config(), "nope")

    def test_lemma1_structure(self):
        report = experiment.run_experiment(small_config(), "lemma1")
        gaps = [row["sup_gap_mid"] for row in report.tables["sup_gaps"]]
        assert all(b < a for a, b in zip(gaps, gaps[1:]))
        assert {"sup gap strictly decreasing", "log-log slope"} \
            == {c.name for c in report.checks}

    def test_lemma2_runs_and_reports(self):
        cfg = small_config(replicates=40)
        report = experiment.run_experiment(cfg, "lemma2")
        assert len(report.tables["tracking"]) == 3
        assert report.replicates == 40

    def test_prop1_smoke(self):
        cfg = small_config(eps=0.02, replicates=40)
        report = experiment.run_experiment(cfg, "prop1")
        assert "ks_distance" in report.statistics
        assert abs(report.statistics["mean"]) < 3.0

    def test_prop2_inverse_check_always_present(self):
        cfg = small_config(replicates=30)
        report = experiment.run_experiment(cfg, "prop2")
        names = [c.name for c in report.checks]
        assert "Psi inverse round-trip error" in names
        inverse = [c for c in report.checks if "inverse" in c.name][0]
        assert inverse.passed

    def test_report_json_deterministic(self):
        a = experiment.run_experiment(small_config(), "lemma2").to_json()
        b = experiment.run_experiment(small_config(), "lemma2").to_json()
        assert a == b
        assert "wall_clock" not in a

    def test_report_json_changes_with_seed(self):
        a = experiment.run_experiment(small_config(seed=1), "lemma2").to_json()
        b = experiment.run_experiment(small_config(seed=2), "lemma2").to_json()
        assert a != b

    def test_write_report_files(self, tmp_path):
        report = experiment.run_experiment(small_config(), "lemma1")
        files = experiment.write_report(report, str(tmp_path))
        names = {os.path.basename(f) for f in files}
        assert "lemma1_report.json" in names
        assert "lemma1_timing.json" in names
        payload = json.loads((tmp_path / "lemma1_report.json").read_text())
        assert payload["schema"] == "hiddenbsde-report-v1"
        assert payload["seed_ledger"]["rule"] == experiment.SEED_RULE

    def test_replicate_independence(self):
        spec = canonical_model(0.1)
        t = spec.time_grid(1e-3)
        noise = NoiseBundle.for_replicates(7, 400, len(t) - 1, 1e-3)
        y_T = forward_values(spec, 1.0, t, noise.dV)[:, -1]
        lag1 = np.corrcoef(y_T[:-1], y_T[1:])[0, 1]
        assert abs(lag1) < 3.0 / np.sqrt(len(y_T))


class TestCli:
    def test_no_arguments_usage(self, capsys):
        assert cli_main([]) == 2

    def test_unknown_flag_exits_2(self):
        assert cli_main(["simulate", "--bogus"]) == 2

    def test_simulate_writes_csv(self, config_file, tmp_path, capsys):
        out = tmp_path / "runs"
        code = cli_main(["simulate", "--config", config_file, "--out-dir", str(out)])
        assert code == 0
        header = (out / "paths.csv").read_text().splitlines()[0]
        assert header == "t,Y,X"

    def test_simulate_seed_determinism(self, config_file, tmp_path):
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert cli_main(["simulate", "--config", config_file,
                             "--seed", "7", "--out-dir", str(out)]) == 0
            outs.append((out / "paths.csv").read_bytes())
        assert outs[0] == outs[1]

    def test_simulate_json_format(self, config_file, tmp_path):
        out = tmp_path / "j"
        assert cli_main(["simulate", "--config", config_file, "--format", "json",
                         "--out-dir", str(out)]) == 0
        payload = json.loads((out / "paths.json").read_text())
        assert set(payload) == {"t", "Y", "X"}

    def test_approx_subcommand(self, config_file, tmp_path):
        out = tmp_path / "ap"
        assert cli_main(["approx", "--config", config_file,
                         "--out-dir", str(out)]) == 0
        report = json.loads((out / "approx_report.json").read_text())
        assert "eps_mse" in report and "limit_values" in report
        header = (out / "approx_paths.csv").read_text().splitlines()[0]
        assert header == "t,replicate,m_hat,Z_hat,s_hat,Z_ref"

    def test_filter_columns(self, config_file, tmp_path):
        out = tmp_path / "f"
        assert cli_main(["filter", "--config", config_file,
                         "--out-dir", str(out)]) == 0
        header = (out / "filter.csv").read_text().splitlines()[0]
        assert header == "t,m,gamma,gamma_star,m_dtheta,innovation"

    def test_estimate_both_methods(self, config_file, tmp_path, capsys):
        for method in ("mle", "substitution"):
            out = tmp_path / method
            assert cli_main(["estimate", "--config", config_file,
                             "--method", method, "--out-dir", str(out)]) == 0
        assert (tmp_path / "substitution" / "substitution_summary.json").exists()

    def test_onestep_emits_eta(self, config_file, tmp_path):
        out = tmp_path / "o"
        assert cli_main(["onestep", "--config", config_file,
                         "--out-dir", str(out)]) == 0
        header = (out / "onestep.csv").read_text().splitlines()[0]
        assert header == "t,theta_star,info,eta"

    def test_pde_solution_and_family(self, config_file, tmp_path):
        out = tmp_path / "p"
        assert cli_main(["pde", "--config", config_file, "--family",
                         "--out-dir", str(out)]) == 0
        assert (out / "pde_solution.csv").exists()
        assert (out / "pde_family_udot.csv").exists()

    def test_mc_suite_roundtrip(self, config_file, tmp_path, capsys):
        out = tmp_path / "mc"
        code = cli_main(["mc", "--suite", "lemma1", "--config", config_file,
                         "--out-dir", str(out)])
        assert code in (0, 1)
        report = json.loads((out / "lemma1_report.json").read_text())
        assert report["suite"] == "lemma1"
        assert ("PASS" if report["passed"] else "FAIL") in capsys.readouterr().out

    def test_mc_byte_identical_reruns(self, config_file, tmp_path):
        blobs = []
        for name in ("r1", "r2"):
            out = tmp_path / name
            cli_main(["mc", "--suite", "lemma2", "--config", config_file,
                      "--seed", "5", "--out-dir", str(out)])
            blobs.append((out / "lemma2_report.json").read_bytes())
        assert blobs[0] == blobs[1]

    def test_shipped_config_parses(self):
        cfg = load_config_file(os.path.join(os.path.dirname(__file__), "..",
                                            "configs", "cm1.toml"))
        assert cfg.theta_true == 1.0
        assert cfg.model.epsilon == 0.01
