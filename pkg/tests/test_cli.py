"""End-to-end tests of the command-line interface."""

import filecmp
import json

import pytest
from click.testing import CliRunner

from levychaos.cli import main

CONFIG = """
schema = 1

[model]
T = 1.0
beta = 1.0
A = [[-0.5]]
Aprime = [[0.3]]
B = [[1.0]]

[model.noise]
alpha = 1.5
directions = [[1.0], [-1.0]]
weights = [0.5, 0.5]
eps = 0.05

[model.mu0]
family = "gaussian"

[model.mu0.params]
mean = [0.0]
std = [1.0]

[functional]
name = "cosine_quadratic"

[functional.params]
scale = 0.25
freq = 1.0

[simulate]
n = 30
replications = 20

[sweep]
n_grid = [8, 16]
replications = 12
reference_samples = 20000

[density]
times = [0.5]
trunc = 30.0

[ito]
t = 0.6
replications = 1500
n_nodes = 16
beta_growth = 1.2
gamma_holder = 1.0

[ito.functional]
name = "smoothed_power"

[ito.functional.params]
beta = 1.2
eps = 0.25

[pde]
trunc = 20.0
times = [0.5]
measures = 1
atoms = 3
h = 0.02

[pde.functional]
name = "linear_sqrt"

[generator_gap]
trunc = 20.0
n_grid = [8, 16, 32]
"""


@pytest.fixture(scope="module")
def config_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "exp.toml"
    path.write_text(CONFIG)
    return str(path)


def run_cmd(args):
    return CliRunner().invoke(main, args, catch_exceptions=False)


class TestCommands:
    def test_simulate(self, config_file, tmp_path):
        res = run_cmd(
            ["simulate", "--config", config_file, "--seed", "3", "--out", str(tmp_path)]
        )
        assert res.exit_code == 0
        assert (tmp_path / "particles.csv").exists()
        summary = json.loads((tmp_path / "summary.json").read_text())
        assert summary["pass"] is True
        # CSV holds replications x particles x dims rows plus a header
        lines = (tmp_path / "particles.csv").read_text().strip().splitlines()
        assert len(lines) == 1 + 20 * 30

    def test_density(self, config_file, tmp_path):
        res = run_cmd(
            ["density", "--config", config_file, "--seed", "3", "--out", str(tmp_path)]
        )
        assert res.exit_code == 0
        summary = json.loads((tmp_path / "summary.json").read_text())
        assert abs(summary["masses"][0] - 1) <= 1e-6
        assert (tmp_path / "density_0.csv").exists()

    def test_ito_check(self, config_file, tmp_path):
        res = run_cmd(
            ["ito-check", "--config", config_file, "--seed", "3", "--out", str(tmp_path)]
        )
        assert res.exit_code == 0
        summary = json.loads((tmp_path / "summary.json").read_text())
        assert summary["residual"] <= summary["tolerance"]

    def test_pde_residual(self, config_file, tmp_path):
        res = run_cmd(
            [
                "pde-residual",
                "--config",
                config_file,
                "--seed",
                "3",
                "--out",
                str(tmp_path),
            ]
        )
        assert res.exit_code == 0
        summary = json.loads((tmp_path / "summary.json").read_text())
        # the report carries the full grid/values/residuals/tolerances payload
        assert set(summary) == {"grid", "values", "residuals", "tolerances", "pass"}
        assert summary["residuals"][0][0] <= summary["tolerances"][0][0]

    def test_generator_gap(self, config_file, tmp_path):
        res = run_cmd(
            [
                "generator-gap",
                "--config",
                config_file,
                "--seed",
                "3",
                "--out",
                str(tmp_path),
            ]
        )
        assert res.exit_code == 0
        summary = json.loads((tmp_path / "summary.json").read_text())
        assert summary["fitted_slope"] == pytest.approx(-1.0, abs=0.2)
        gaps = summary["residuals"]
        assert gaps[0] > gaps[-1]

    def test_rate_fit_emits_report(self, config_file, tmp_path):
        res = run_cmd(
            ["rate-fit", "--config", config_file, "--seed", "3", "--out", str(tmp_path)]
        )
        # desk-scale replication counts may drop noise-dominated points, so
        # only the artifact contract is asserted here
        assert res.exit_code in (0, 1)
        report = json.loads((tmp_path / "rates.json").read_text())
        assert report["n_grid"] == [8, 16]
        assert (tmp_path / "rates.csv").exists()


class TestDeterminism:
    @pytest.mark.parametrize("command", ["simulate", "density", "generator-gap"])
    def test_byte_identical_reruns(self, config_file, tmp_path, command):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            run_cmd([command, "--config", config_file, "--seed", "11", "--out", str(out)])
        for pa in sorted(a.iterdir()):
            assert filecmp.cmp(pa, b / pa.name, shallow=False), pa.name


class TestErrors:
    def test_bad_schema_rejected(self, tmp_path):
        bad = tmp_path / "bad.toml"
        bad.write_text("schema = 99\n")
        res = run_cmd(
            ["density", "--config", str(bad), "--seed", "0", "--out", str(tmp_path)]
        )
        assert res.exit_code != 0
        assert "schema" in res.output

    def test_pde_requires_finite_truncation(self, config_file, tmp_path):
        text = CONFIG.replace("[pde]\ntrunc = 20.0", "[pde]")
        assert "trunc = 20.0\ntimes" not in text  # sanity on the rewrite
        path = tmp_path / "notrunc.toml"
        path.write_text(text)
        res = run_cmd(
            ["pde-residual", "--config", str(path), "--seed", "0", "--out", str(tmp_path)]
        )
        assert res.exit_code != 0
        assert "truncation" in res.output

    def test_missing_config_file(self, tmp_path):
        res = run_cmd(
            ["density", "--config", str(tmp_path / "nope.toml"), "--seed", "0", "--out", str(tmp_path)]
        )
        assert res.exit_code != 0
