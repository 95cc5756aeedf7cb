import time
from pathlib import Path

import numpy as np
import pytest

from sourcerec.cli.config import SCHEMA, parse_config
from sourcerec.cli.main import EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, main, run
from sourcerec.cli.output import read_csv
from sourcerec.errors import ConfigInvalid
from sourcerec.fem import PdeCoefficients, assemble
from sourcerec.cases import land_use
from sourcerec.forward import observation_matrix, steady_solution_prior
from sourcerec.gmrf import MaternHyper, matern_precision
from sourcerec.mesh import build_interval_mesh

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

SMALL = """
case = steady-1d
seed = 4
mesh.x = 0 20
mesh.h = 0.5
mesh.buffer = 3
pde.D = 0.5
pde.r = 0.2
prior.rho = 2
prior.sigma2_f = 2
noise.sigma2 = 0.5
"""


def write(tmp_path, text, name="run.conf"):
    p = tmp_path / name
    p.write_text(text)
    return p


class TestConfig:
    def test_defaults(self):
        cfg = parse_config("")
        assert cfg.case == "steady-1d" and cfg["seed"] == 0 and cfg["obs.file"] is None
        assert set(cfg.values) == set(SCHEMA)

    @pytest.mark.parametrize("text, field, line", [
        ("case = steady-1d\nbogus.key = 1\n", "bogus.key", 2),
        ("\n\nprior.rho = abc\n", "prior.rho", 3),
        ("seed = 1\nseed = 2\n", "seed", 2),
        ("noise.sigma2 = -1\n", "noise.sigma2", 1),
        ("prior.sigma2_f = 0\n", "prior.sigma2_f", 1),
        ("case = steady-3d\n", "case", 1),
        ("prior.alpha = 3\n", "prior.alpha", 1),
        ("mcmc.prior.rho = normal 0 1\n", "mcmc.prior.rho", 1),
        ("seed = 3\nobs.file = nowhere.csv\n", "obs.file", 2),
        ("obs.n = -1\n", "obs.n", 1),
        ("accuracy.sizes = 10 5\n", "accuracy.sizes", 1),
    ])
    def test_diagnostics(self, text, field, line):
        with pytest.raises(ConfigInvalid) as err:
            parse_config(text)
        assert err.value.field == field and err.value.line == line
        assert f"line {line}" in str(err.value)

    def test_missing_equals(self):
        with pytest.raises(ConfigInvalid) as err:
            parse_config("# comment\njust words\n")
        assert err.value.line == 2

    def test_two_observation_sources(self, tmp_path):
        (tmp_path / "o.csv").write_text("x,value\n1,2\n")
        with pytest.raises(ConfigInvalid) as err:
            parse_config("obs.file = o.csv\nobs.n = 5\n", tmp_path / "c.conf")
        assert err.value.field == "obs.n"

    def test_text_round_trip(self):
        cfg = parse_config("prior.rho = 0.123456789012\nmcmc.prior.D = invgamma 2.5 0.3\ncovariates.beta = 1 2\n"
                           "covariates.zones = 5\nmcmc.adapt = no\n")
        again = parse_config(cfg.to_text(["header"]))
        assert again.values == cfg.values

    def test_relative_files_resolve_against_config(self, tmp_path):
        (tmp_path / "d").mkdir()
        (tmp_path / "d" / "o.csv").write_text("x,value\n1,2\n")
        cfg = parse_config("obs.file = d/o.csv\n", tmp_path / "c.conf")
        assert Path(cfg["obs.file"]) == (tmp_path / "d" / "o.csv").resolve()


def files_equal(a, b):
    names = sorted(p.name for p in Path(a).iterdir())
    assert names == sorted(p.name for p in Path(b).iterdir())
    return all((Path(a) / n).read_bytes() == (Path(b) / n).read_bytes() for n in names)


class TestSimulate:
    def test_steady_stream_example(self, tmp_path):
        assert main(["simulate", "--config", str(CONFIGS / "cs1.conf"), "--out", str(tmp_path / "o")]) == EXIT_OK
        truth = read_csv(tmp_path / "o" / "truth.csv")
        obs = read_csv(tmp_path / "o" / "observations.csv")
        assert truth["x"].shape == (621,) and obs["value"].shape == (50,)
        np.testing.assert_allclose(obs["x"], 0.5 + np.arange(50))
        beta = (tmp_path / "o" / "truth_beta.csv").read_text().splitlines()
        assert beta == ["name,value", "zone1,6", "zone2,1", "zone3,3"]

    def test_spacetime_example(self, tmp_path):
        assert main(["simulate", "--config", str(CONFIGS / "cs2.conf"), "--out", str(tmp_path / "o")]) == EXIT_OK
        obs = read_csv(tmp_path / "o" / "observations.csv")
        assert obs["value"].shape == (200,) and set(np.unique(obs["t"]).round(6)) == set(np.linspace(75, 100, 20).round(6))
        assert read_csv(tmp_path / "o" / "truth.csv")["f"].shape == (101 * 2000,)

    def test_seed_repetition_byte_identical(self, tmp_path):
        cfg = write(tmp_path, SMALL + "obs.n = 12\n")
        run("simulate", cfg, outdir=tmp_path / "a")
        run("simulate", cfg, outdir=tmp_path / "b")
        assert files_equal(tmp_path / "a", tmp_path / "b")
        run("simulate", cfg, seed=5, outdir=tmp_path / "c")
        assert (tmp_path / "a" / "truth.csv").read_bytes() != (tmp_path / "c" / "truth.csv").read_bytes()

    def test_manifest_round_trip(self, tmp_path):
        cfg = write(tmp_path, SMALL + "obs.n = 12\ncovariates.kind = land-use\ncovariates.zones = 7 14\n")
        run("krige", cfg, outdir=tmp_path / "a")
        run("krige", tmp_path / "a" / "manifest.txt", outdir=tmp_path / "b")
        assert files_equal(tmp_path / "a", tmp_path / "b")
        assert "sha256=" in (tmp_path / "a" / "manifest.txt").read_text()


class TestKrige:
    def test_zero_observations_give_prior(self, tmp_path):
        cfg = write(tmp_path, SMALL + "obs.n = 0\n")
        run("krige", cfg, outdir=tmp_path / "o")
        post = read_csv(tmp_path / "o" / "posterior_u.csv")
        mesh = build_interval_mesh(0, 20, 41 + 12, buffer=3.0)
        sys = assemble(mesh, PdeCoefficients(0.5, 0.2, lambda x: 1 + 0.5 * np.sin(2 * np.pi * x[:, 0] / 20)))
        prior = steady_solution_prior(sys, matern_precision(sys, MaternHyper(2.0, 2.0)))
        sd = np.sqrt(np.diag(np.linalg.inv(prior.Q.toarray())))
        np.testing.assert_allclose(post["sd"], sd, rtol=1e-8)
        assert np.all(post["mean"] == 0)

    def test_three_zone_coefficients(self, tmp_path):
        run("krige", CONFIGS / "cs1.conf", outdir=tmp_path / "o")
        lines = (tmp_path / "o" / "posterior_beta.csv").read_text().splitlines()
        assert lines[0] == "name,mean,sd,truth"
        assert [l.split(",")[0] for l in lines[1:]] == ["zone1", "zone2", "zone3"]
        assert (tmp_path / "o" / "posterior.svg").read_text().lstrip().startswith("<?xml")

    def test_from_files_matches_dense(self, tmp_path):
        cfg = write(tmp_path, SMALL + "obs.n = 9\ncovariates.kind = land-use\ncovariates.zones = 10\n"
                    "covariates.beta = 2 -1\n")
        run("simulate", cfg, outdir=tmp_path / "sim")
        files = write(tmp_path, SMALL + "covariates.kind = land-use\ncovariates.zones = 10\ncovariates.beta = 0 0\n"
                      "obs.file = sim/observations.csv\nobs.truth_file = sim/truth.csv\n", "files.conf")
        run("krige", files, outdir=tmp_path / "k")
        post = read_csv(tmp_path / "k" / "posterior_u.csv")
        truth = read_csv(tmp_path / "sim" / "truth.csv")
        np.testing.assert_array_equal(post["truth"], truth["u"])
        # independent covariance-form oracle for the solution mean
        mesh = build_interval_mesh(0, 20, 53, buffer=3.0)
        sys = assemble(mesh, PdeCoefficients(0.5, 0.2, lambda x: 1 + 0.5 * np.sin(2 * np.pi * x[:, 0] / 20)))
        X = land_use(mesh.coords, (10.0,))
        Sf = np.linalg.inv(matern_precision(sys, MaternHyper(2.0, 2.0)).Q.toarray())
        Sb = 25.0 * np.eye(2)
        Binv = np.linalg.solve(sys.K.toarray(), np.diag(sys.lumped))
        Su = Binv @ (Sf + X @ Sb @ X.T) @ Binv.T
        obs = read_csv(tmp_path / "sim" / "observations.csv")
        A = observation_matrix(mesh, obs["x"]).toarray()
        mean = Su @ A.T @ np.linalg.solve(A @ Su @ A.T + 0.5 * np.eye(9), obs["value"])
        np.testing.assert_allclose(post["mean"], mean, rtol=1e-7, atol=1e-7 * np.abs(mean).max())

    def test_spacetime_case_two_budget(self, tmp_path):
        t0 = time.perf_counter()
        assert main(["krige", "--config", str(CONFIGS / "cs2.conf"), "--out", str(tmp_path / "o")]) == EXIT_OK
        assert time.perf_counter() - t0 < 600
        g = read_csv(tmp_path / "o" / "posterior_grid.csv")
        assert g["f_sd"].shape == (202_000,) and np.all(g["f_sd"] > 0)

    def test_data_mesh_mismatch(self, tmp_path):
        (tmp_path / "o.csv").write_text("x,value\n25.0,1.0\n")
        cfg = write(tmp_path, SMALL + "obs.file = o.csv\n")
        assert main(["krige", "--config", str(cfg), "--out", str(tmp_path / "k")]) == EXIT_CONFIG

    def test_two_dimensional(self, tmp_path):
        cfg = write(tmp_path, "case = steady-2d\nmesh.x = 0 4\nmesh.y = 0 3\nmesh.nx = 9\nmesh.ny = 7\n"
                    "mesh.buffer = 1\npde.D = 0.5\npde.r = 0.1\npde.velocity = 1 0.5\nprior.rho = 1.5\n"
                    "prior.sigma2_f = 1\nnoise.sigma2 = 0.1\nobs.n = 10\n")
        run("krige", cfg, outdir=tmp_path / "o")
        post = read_csv(tmp_path / "o" / "posterior_f.csv")
        assert set(post) >= {"x", "y", "mean", "sd", "truth"}


class TestOtherCommands:
    def test_mcmc_point_mass_chains_are_flat(self, tmp_path):
        pm = "".join(f"mcmc.prior.{k} = point {v}\n" for k, v in
                     [("rho", 2.0), ("D", 0.5), ("r", 0.2), ("v", 0.25), ("sigma2_f", 2.0)])
        cfg = write(tmp_path, SMALL + "obs.n = 10\nmcmc.chains = 2\nmcmc.iterations = 10\nmcmc.burn_in = 2\n"
                    "mcmc.thin = 2\n" + pm)
        assert main(["mcmc", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_OK
        ch = read_csv(tmp_path / "o" / "chains.csv")
        assert ch["rho"].shape == (10,)
        for k in ("rho", "D", "r", "v", "sigma2_f"):
            assert np.ptp(ch[k]) == 0

    def test_mcmc_short_run(self, tmp_path):
        cfg = write(tmp_path, SMALL + "obs.n = 15\ncovariates.kind = land-use\ncovariates.zones = 10\n"
                    "covariates.beta = 1 2\nmcmc.chains = 2\nmcmc.iterations = 20\nmcmc.burn_in = 10\nmcmc.thin = 5\n")
        run("mcmc", cfg, workers=2, outdir=tmp_path / "o")
        ch = read_csv(tmp_path / "o" / "chains.csv")
        assert ch["v_beta"].shape == (8,) and np.all(ch["sigma2_f"] > 0)
        assert (tmp_path / "o" / "posterior_params.svg").exists()

    def test_mcmc_rejects_spacetime(self, tmp_path):
        cfg = write(tmp_path, "case = spacetime-1d\nspacetime.sensors = 2\n")
        assert main(["mcmc", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_CONFIG

    def test_accuracy(self, tmp_path):
        cfg = write(tmp_path, SMALL + "accuracy.sizes = 10 40 160\naccuracy.replicates = 4\n")
        run("accuracy", cfg, outdir=tmp_path / "o")
        curve = read_csv(tmp_path / "o" / "error_curve.csv")
        assert np.all(np.diff(curve["approx_u"]) < 0)
        assert "slope" in (tmp_path / "o" / "slopes.csv").read_text()

    def test_st_demo(self, tmp_path):
        cfg = write(tmp_path, "case = spacetime-1d\nmesh.x = 0 10\nprior.alpha = 4\ndemo.nodes = 61\n"
                    "demo.buffer = 2\ndemo.steps = 400\ndemo.stride_t = 10\ndemo.stride_x = 2\n")
        run("st-demo", cfg, outdir=tmp_path / "o")
        v = read_csv(tmp_path / "o" / "variance_by_time.csv")
        assert v["mean_square"].shape == (400,)
        assert v["mean_square"][:40].mean() < v["mean_square"][200:].mean()
        g = read_csv(tmp_path / "o" / "sample_grid.csv")
        assert np.unique(g["step"]).size == 40

    def test_numerical_failure_exit_code(self, tmp_path):
        # pure diffusion with zero-flux boundaries has a singular operator
        cfg = write(tmp_path, SMALL.replace("pde.r = 0.2", "pde.r = 0") + "pde.velocity = 0\nobs.n = 5\n")
        assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_NUMERIC

    def test_missing_config(self, tmp_path, capsys):
        assert main(["krige", "--config", str(tmp_path / "none.conf")]) == EXIT_CONFIG
        assert "config error" in capsys.readouterr().err

    def test_no_observation_source(self, tmp_path):
        cfg = write(tmp_path, SMALL)
        assert main(["krige", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_CONFIG

    def test_log_level(self, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv("SOURCEREC_LOG", "info")
        cfg = write(tmp_path, SMALL + "obs.n = 3\n")
        assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_OK
        assert "sourcerec INFO" in capsys.readouterr().err
