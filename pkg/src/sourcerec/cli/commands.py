"""The five batch commands.  Each takes a resolved :class:`RunConfig` and an
output directory and returns the list of files written."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass
from functools import partial
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.stats import qmc

from .. import __version__
from ..accuracy import SweepCase, convergence_sweep, interior_weights, sample_locations
from ..cases import SpaceTimeSetup, cs2_plan, land_use, stream_velocity
from ..errors import ShapeMismatch
from ..fem import PdeCoefficients, assemble
from ..forward import (
    ObservationSet,
    build_spacetime_operator,
    observation_matrix,
    simulate,
    steady_solution_prior,
)
from ..gmrf import (
    GmrfPrior,
    MaternHyper,
    RegressionDesign,
    iterate_st_matern,
    matern_precision,
    regression_joint_precision,
    st_matern_source,
)
from ..inference import krige_spacetime
from ..inference.kriging import krige_joint_regression, krige_solution, krige_source
from ..inference.mcmc import McmcConfig, SteadyModel, run_mcmc
from ..mesh import build_interval_mesh, build_rect_mesh, read_mesh_csv
from . import output as out
from .config import RunConfig, require_observations

log = logging.getLogger("sourcerec")


# ----------------------------------------------------------------------
# model construction

@dataclass
class SteadyCase:
    sys: object
    f_prior: GmrfPrior
    design: RegressionDesign | None
    beta: np.ndarray | None


def _velocity(cfg: RunConfig, mesh):
    if cfg["pde.velocity_file"] is not None:
        cols = out.read_csv(cfg["pde.velocity_file"])
        names = ["vx", "vy"][: mesh.dim]
        if any(n not in cols for n in names):
            cfg.fail("pde.velocity_file", f"velocity file needs columns {', '.join(names)}")
        v = np.column_stack([cols[n] for n in names])
        if v.shape[0] != mesh.n_nodes:
            cfg.fail("pde.velocity_file", f"velocity file has {v.shape[0]} rows, mesh has {mesh.n_nodes} nodes")
        return v
    kind = cfg["pde.velocity"]
    a, b = cfg["mesh.x"]
    if kind == "stream":
        length = b - a
        if mesh.dim == 1:
            return partial(stream_velocity, length=length)
        return lambda x: np.column_stack([stream_velocity(x, length), np.zeros(x.shape[0])])
    try:
        vals = tuple(float(t) for t in kind.split())
    except ValueError:
        cfg.fail("pde.velocity", "expected 'stream', a number, or 'vx vy'")
    if len(vals) != mesh.dim:
        cfg.fail("pde.velocity", f"expected {mesh.dim} velocity component(s)")
    return vals[0] if mesh.dim == 1 else np.array(vals)


def build_mesh(cfg: RunConfig, buffer):
    if cfg["mesh.nodes_file"] is not None:
        return read_mesh_csv(cfg["mesh.nodes_file"], cfg["mesh.cells_file"])
    a, b = cfg["mesh.x"]
    if cfg.case == "steady-2d":
        return build_rect_mesh(cfg["mesh.x"], cfg["mesh.y"], cfg["mesh.nx"], cfg["mesh.ny"], buffer)
    h = cfg["mesh.h"]
    n = int(round((b - a) / h)) + 1
    nb = int(round(buffer / h))
    return build_interval_mesh(a, b, n + 2 * nb, buffer=nb * h)


def steady_case(cfg: RunConfig) -> SteadyCase:
    rho, s2f = cfg["prior.rho"], cfg["prior.sigma2_f"]
    buffer = cfg.get("mesh.buffer", 3 * rho)
    mesh = build_mesh(cfg, buffer)
    sys = assemble(mesh, PdeCoefficients(cfg["pde.D"], cfg["pde.r"], _velocity(cfg, mesh)))
    f_prior = matern_precision(sys, MaternHyper(rho, s2f, cfg["prior.alpha"]))
    design = beta = None
    if cfg["covariates.kind"] == "land-use":
        X = land_use(mesh.coords, cfg["covariates.zones"])
        names = [f"zone{i + 1}" for i in range(X.shape[1])]
        design = RegressionDesign(X, v_beta=cfg["covariates.sigma2_beta"] / s2f, names=names)
        beta = np.array(cfg["covariates.beta"])
    log.info("steady mesh: %d nodes, %d cells", mesh.n_nodes, mesh.n_cells)
    return SteadyCase(sys, f_prior, design, beta)


def spacetime_setup(cfg: RunConfig) -> SpaceTimeSetup:
    if cfg["prior.alpha"] not in (2, 4):
        cfg.fail("prior.alpha", "alpha must be 2 or 4")
    return SpaceTimeSetup(
        tau=cfg["spacetime.tau"], kappa=cfg["spacetime.kappa"], alpha=cfg["prior.alpha"],
        variance=cfg["spacetime.variance"], D=cfg["pde.D"], r=cfg["pde.r"],
        sigma2_eps=cfg["noise.sigma2"], region=tuple(cfg["mesh.x"]), buffer=cfg.get("mesh.buffer", 5.0),
        n_nodes=cfg["spacetime.nodes"], dt=cfg["spacetime.dt"], n_steps=cfg["spacetime.steps"],
        n_sensors=cfg.get("spacetime.sensors", 0), n_times=cfg["spacetime.times"])


def spacetime_case(cfg: RunConfig):
    st = spacetime_setup(cfg)
    a, b = st.region
    mesh = build_interval_mesh(a, b, st.n_nodes, buffer=st.buffer)
    sys = assemble(mesh, PdeCoefficients(st.D, st.r, _velocity(cfg, mesh)))
    fp = st_matern_source(sys, st.tau, st.kappa, st.alpha, st.dt, st.n_steps, variance=st.variance)
    op = build_spacetime_operator(sys, st.dt, st.n_steps)
    log.info("space-time grid: %d nodes x %d steps", sys.n, st.n_steps)
    return st, sys, fp, op


def steady_locations(cfg: RunConfig, mesh, n):
    if mesh.dim == 1:
        return sample_locations(mesh.region, n)
    (x0, x1), (y0, y1) = mesh.region
    pts = qmc.Halton(d=2, scramble=False).random(n + 1)[1:]      # skip the corner point
    return qmc.scale(pts, [x0, y0], [x1, y1])


# ----------------------------------------------------------------------
# data

@dataclass
class Data:
    obs: ObservationSet
    truth: dict | None           # "f", "u" (and "beta") when known


def simulate_steady(cfg, case: SteadyCase, rng):
    n_obs = cfg["obs.n"]
    locs = steady_locations(cfg, case.sys.mesh, n_obs)
    mean = None
    if case.design is not None:
        mean = case.design.X @ case.beta
    prior = GmrfPrior(case.f_prior.Q, mean).with_factor(case.f_prior.factor)
    f, u, obs = simulate(prior, case.sys, locs, cfg["noise.sigma2"], rng=rng)
    truth = {"f": f, "u": u}
    if case.beta is not None:
        truth["beta"] = case.beta
    return Data(obs, truth)


def simulate_spacetime(cfg, st, op, fp, rng):
    locs, times = cs2_plan(st)
    L, T = np.meshgrid(locs, times)
    f, u, obs = simulate(fp, op, L.ravel(), cfg["noise.sigma2"], rng=rng, times=T.ravel())
    return Data(obs, {"f": f, "u": u})


def _read_observations(cfg, mesh, op=None):
    cols = out.read_csv(cfg["obs.file"])
    names = ["x", "y"][: mesh.dim]
    need = names + (["t"] if op is not None else []) + ["value"]
    missing = [n for n in need if n not in cols]
    if missing:
        cfg.fail("obs.file", f"observation file lacks column(s) {', '.join(missing)}")
    locs = np.column_stack([cols[n] for n in names]) if mesh.dim == 2 else cols["x"]
    times = cols["t"] if op is not None else None
    A = observation_matrix(mesh, locs, times, op)
    return ObservationSet(A, cols["value"], cfg["noise.sigma2"], locs, times)


def _read_truth(cfg, n_nodes, op=None):
    path = cfg["obs.truth_file"]
    if path is None:
        return None
    cols = out.read_csv(path)
    if "f" not in cols or "u" not in cols:
        cfg.fail("obs.truth_file", "truth file needs columns f and u")
    expect = n_nodes if op is None else op.n
    if cols["f"].shape[0] != expect:
        raise ShapeMismatch(f"truth file has {cols['f'].shape[0]} rows, model has {expect} values")
    return {"f": cols["f"], "u": cols["u"]}


def steady_data(cfg, case, rng) -> Data:
    require_observations(cfg)
    if cfg["obs.file"] is not None:
        return Data(_read_observations(cfg, case.sys.mesh), _read_truth(cfg, case.sys.n))
    return simulate_steady(cfg, case, rng)


def spacetime_data(cfg, st, sys, op, fp, rng) -> Data:
    require_observations(cfg)
    if cfg["obs.file"] is not None:
        return Data(_read_observations(cfg, sys.mesh, op), _read_truth(cfg, sys.n, op))
    return simulate_spacetime(cfg, st, op, fp, rng)


# ----------------------------------------------------------------------
# shared writers

def _node_columns(mesh):
    idx = np.arange(mesh.n_nodes)
    if mesh.dim == 1:
        return ["node", "x"], [idx, mesh.x]
    return ["node", "x", "y"], [idx, mesh.coords[:, 0], mesh.coords[:, 1]]


def _obs_columns(obs, dim):
    locs = np.asarray(obs.locations, dtype=float).reshape(obs.m, -1) if obs.m else np.zeros((0, dim))
    header = ["x", "y"][:dim]
    cols = [locs[:, i] for i in range(dim)]
    if obs.times is not None:
        header.append("t")
        cols.append(np.asarray(obs.times, dtype=float))
    return header + ["value"], cols + [obs.y]


def _spacetime_index(op, mesh):
    step = np.repeat(np.arange(op.n_steps), op.n_space)
    t = np.asarray(op.times)[step]
    node = np.tile(np.arange(op.n_space), op.n_steps)
    return ["step", "t", "node", "x"], [step, t, node, mesh.x[node]]


# ----------------------------------------------------------------------
# commands

def cmd_simulate(cfg: RunConfig, outdir: Path, workers=1):
    rng = np.random.default_rng(cfg["seed"])
    files = []
    if cfg.case == "spacetime-1d":
        if cfg["spacetime.sensors"] is None:
            cfg.fail("spacetime.sensors", "simulate needs spacetime.sensors")
        st, sys, fp, op = spacetime_case(cfg)
        data = simulate_spacetime(cfg, st, op, fp, rng)
        h, c = _spacetime_index(op, sys.mesh)
        files.append(out.write_csv(outdir / "truth.csv", h + ["f", "u"], c + [data.truth["f"], data.truth["u"]]))
        dim = 1
    else:
        if cfg["obs.n"] is None:
            cfg.fail("obs.n", "simulate needs obs.n")
        case = steady_case(cfg)
        data = simulate_steady(cfg, case, rng)
        h, c = _node_columns(case.sys.mesh)
        files.append(out.write_csv(outdir / "truth.csv", h + ["f", "u"], c + [data.truth["f"], data.truth["u"]]))
        if case.beta is not None:
            files.append(out.write_csv(outdir / "truth_beta.csv", ["name", "value"],
                                       [case.design.names, case.beta]))
        dim = case.sys.mesh.dim
    h, c = _obs_columns(data.obs, dim)
    files.append(out.write_csv(outdir / "observations.csv", h, c))
    return files


def _steady_posterior(case: SteadyCase, obs, s2f):
    if case.design is not None:
        J = regression_joint_precision(case.sys, case.f_prior, case.design, s2f)
        return krige_joint_regression(J, obs, case.sys, case.design)
    post_u = krige_solution(steady_solution_prior(case.sys, case.f_prior), obs)
    return {"u": post_u, "f": krige_source(case.sys, post_u)}


def cmd_krige(cfg: RunConfig, outdir: Path, workers=1):
    rng = np.random.default_rng(cfg["seed"])
    if cfg.case == "spacetime-1d":
        return _krige_spacetime(cfg, outdir, rng)
    case = steady_case(cfg)
    data = steady_data(cfg, case, rng)
    mesh = case.sys.mesh
    if data.obs.A.shape[1] != case.sys.n:
        raise ShapeMismatch("observations do not match the mesh")
    t0 = time.perf_counter()
    post = _steady_posterior(case, data.obs, cfg["prior.sigma2_f"])
    log.info("kriging took %.2f s", time.perf_counter() - t0)
    files = []
    h, c = _node_columns(mesh)
    truth = data.truth or {}
    summaries = {}
    for name in ("u", "f"):
        mean, sd = post[name].mean, post[name].sd()
        summaries[name] = (mean, sd)
        extra_h, extra_c = (["truth"], [truth[name]]) if name in truth else ([], [])
        files.append(out.write_csv(outdir / f"posterior_{name}.csv", h + ["mean", "sd"] + extra_h,
                                   c + [mean, sd] + extra_c))
    if "beta" in post:
        mean, sd = post["beta"].mean, post["beta"].sd()
        cols = [case.design.names, mean, sd] + ([truth["beta"]] if "beta" in truth else [])
        files.append(out.write_csv(outdir / "posterior_beta.csv",
                                   ["name", "mean", "sd"] + (["truth"] if "beta" in truth else []), cols))
    n_s = cfg["plot.samples"]
    if mesh.dim == 1:
        order = np.argsort(mesh.x)
        panels = []
        for name in ("u", "f"):
            mean, sd = summaries[name]
            smp = post[name].sample(rng, n_s) if n_s > 0 else None
            tr = truth.get(name)
            panels.append((name, mean[order], sd[order], None if tr is None else tr[order],
                           None if smp is None else smp[order]))
        files.append(out.plot_profile(outdir / "posterior.svg", mesh.x[order], panels))
    else:
        files.append(out.plot_field_2d(outdir / "posterior.svg", mesh, [
            ("u mean", summaries["u"][0]), ("u sd", summaries["u"][1]),
            ("f mean", summaries["f"][0]), ("f sd", summaries["f"][1])]))
    return files


def _krige_spacetime(cfg, outdir, rng):
    st, sys, fp, op = spacetime_case(cfg)
    data = spacetime_data(cfg, st, sys, op, fp, rng)
    t0 = time.perf_counter()
    post = krige_spacetime(op, fp, data.obs, cfg["spacetime.method"])
    log.info("space-time kriging (%s) took %.2f s", post.method, time.perf_counter() - t0)
    h, c = _spacetime_index(op, sys.mesh)
    names = ["u_mean", "u_sd", "f_mean", "f_sd"]
    cols = [post.grid(n).ravel() for n in names]
    truth = data.truth or {}
    if truth:
        names += ["u_truth", "f_truth"]
        cols += [truth["u"], truth["f"]]
    files = [out.write_csv(outdir / "posterior_grid.csv", h + names, c + cols)]
    keep = sys.mesh.interior
    x = sys.mesh.x[keep]
    t = np.asarray(op.times)
    grids = [(n, post.grid(n)[:, keep]) for n in ("f_mean", "f_sd", "u_mean", "u_sd")]
    if truth:
        grids.insert(0, ("f truth", truth["f"].reshape(op.n_steps, op.n_space)[:, keep]))
    obs = data.obs
    markers = None if obs.times is None else (np.asarray(obs.locations), np.asarray(obs.times))
    files.append(out.plot_heatmaps(outdir / "posterior.svg", x, t, grids, markers))
    return files


def cmd_mcmc(cfg: RunConfig, outdir: Path, workers=1):
    if cfg.case == "spacetime-1d":
        cfg.fail("case", "mcmc supports the steady cases only")
    rng = np.random.default_rng(cfg["seed"])
    case = steady_case(cfg)
    data = steady_data(cfg, case, rng)
    model = SteadyModel(case.sys, cfg["prior.alpha"], case.design)
    priors = cfg.mcmc_priors(model.has_beta)
    # the likelihood is parameterized by v = noise variance / source variance
    obs = ObservationSet(data.obs.A, data.obs.y, 1.0, data.obs.locations)
    mc = McmcConfig(priors=priors, n_chains=cfg["mcmc.chains"], n_iter=cfg["mcmc.iterations"],
                    burn_in=cfg["mcmc.burn_in"], thin=cfg["mcmc.thin"], seed=cfg["seed"],
                    adapt=cfg["mcmc.adapt"], sigma2_update=cfg["mcmc.sigma2_update"], workers=workers)
    t0 = time.perf_counter()
    res = run_mcmc(model, obs, mc)
    log.info("mcmc took %.1f s", time.perf_counter() - t0)
    names = res.params
    chain_id = np.concatenate([np.full(len(c.loglik), i) for i, c in enumerate(res.chains)])
    it = np.concatenate([c.iterations for c in res.chains])
    files = [out.write_csv(outdir / "chains.csv", ["chain", "iteration"] + names + ["loglik"],
                           [chain_id, it] + [res.pooled(k) for k in names]
                           + [np.concatenate([c.loglik for c in res.chains])])]
    acc = [(k, i, c.acceptance[k]) for i, c in enumerate(res.chains) for k in c.acceptance]
    files.append(out.write_csv(outdir / "acceptance.csv", ["param", "chain", "rate"],
                               [[a[0] for a in acc], np.array([a[1] for a in acc]), np.array([a[2] for a in acc], dtype=float)]))
    h, c = _node_columns(case.sys.mesh)
    truth = data.truth or {}
    for name in ("u", "f"):
        if name in res.summaries:
            mean, sd = res.summaries[name]
            extra = ([truth[name]], ["truth"]) if name in truth else ([], [])
            files.append(out.write_csv(outdir / f"posterior_{name}.csv", h + ["mean", "sd"] + extra[1],
                                       c + [mean, sd] + extra[0]))
    if "beta" in res.summaries:
        mean, sd = res.summaries["beta"]
        files.append(out.write_csv(outdir / "posterior_beta.csv", ["name", "mean", "sd"],
                                   [case.design.names, mean, sd]))
    files.append(out.plot_histograms(outdir / "posterior_params.svg", {k: res.pooled(k) for k in names}, priors))
    return files


def cmd_accuracy(cfg: RunConfig, outdir: Path, workers=1):
    if cfg.case != "steady-1d":
        cfg.fail("case", "accuracy sweeps run on the steady-1d case")
    case = steady_case(cfg)
    sys, mesh = case.sys, case.sys.mesh
    n = sys.n
    s2f = cfg["prior.sigma2_f"]
    if case.design is not None:
        prior = regression_joint_precision(sys, case.f_prior, case.design, s2f)
        p = case.design.p
    else:
        prior = steady_solution_prior(sys, case.f_prior)
        p = 0
    Z = sp.csr_matrix((n, p))
    to_u = sp.hstack([sp.identity(n), Z], format="csr")
    to_f = sp.hstack([sys.pushforward(), Z], format="csr")

    sweep = SweepCase(prior, to_u, to_f, interior_weights(mesh), cfg["noise.sigma2"],
                      partial(_locate, mesh, p), mesh.region)
    t0 = time.perf_counter()
    curve = convergence_sweep(sweep, cfg["accuracy.sizes"], cfg["accuracy.replicates"], cfg["seed"], workers)
    log.info("sweep took %.1f s", time.perf_counter() - t0)
    files = [outdir / "error_curve.csv"]
    curve.to_csv(files[0])
    rows = []
    for which in ("u", "f"):
        for approx in (False, True):
            try:
                s = curve.fitted_slope(which, approx=approx)
            except ValueError:
                s = math.nan
            rows.append((which, "approx" if approx else "empirical", s))
    files.append(out.write_csv(outdir / "slopes.csv", ["field", "kind", "slope"],
                               [[r[0] for r in rows], [r[1] for r in rows], np.array([r[2] for r in rows])]))
    files.append(out.plot_error_curve(outdir / "error_curve.svg", curve))
    return files


def _locate(mesh, p, locs):
    A = observation_matrix(mesh, locs)
    if p:
        A = sp.hstack([A, sp.csr_matrix((A.shape[0], p))], format="csr")
    return A


def cmd_st_demo(cfg: RunConfig, outdir: Path, workers=1):
    a, b = cfg["mesh.x"]
    nodes, steps, dt = cfg["demo.nodes"], cfg["demo.steps"], cfg["demo.dt"]
    if nodes < 2 or steps < 1:
        cfg.fail("demo.nodes", "need at least two nodes and one step")
    mesh = build_interval_mesh(a, b, nodes, buffer=cfg["demo.buffer"])
    sys = assemble(mesh, PdeCoefficients(1.0, 0.0, 0.0))
    rng = np.random.default_rng(cfg["seed"])
    tau, kappa, alpha = cfg["spacetime.tau"], cfg["spacetime.kappa"], cfg["prior.alpha"]
    st_, sx = cfg["demo.stride_t"], cfg["demo.stride_x"]
    keep = np.flatnonzero(mesh.interior)[::sx]
    t0 = time.perf_counter()
    rows, var = [], np.empty(steps)
    # no temporal buffer is dropped: the transient from the zero start is shown
    for k, x in enumerate(iterate_st_matern(sys, tau, kappa, alpha, dt, steps, rng)):
        xi = x[mesh.interior, 0]
        var[k] = float(np.mean(xi * xi))
        if k % st_ == 0:
            rows.append(x[keep, 0].copy())
    log.info("nested-diffusion sample took %.1f s", time.perf_counter() - t0)
    times = dt * (np.arange(steps) + 1)
    G = np.array(rows)
    tk = times[::st_]
    files = [out.write_csv(outdir / "variance_by_time.csv", ["step", "t", "mean_square"],
                           [np.arange(steps), times, var])]
    step = np.repeat(np.arange(0, steps, st_), keep.size)
    files.append(out.write_csv(outdir / "sample_grid.csv", ["step", "t", "node", "x", "value"],
                               [step, times[step], np.tile(keep, len(rows)), np.tile(mesh.x[keep], len(rows)),
                                G.ravel()]))
    files.append(out.plot_heatmaps(outdir / "sample.svg", mesh.x[keep], tk, [("f(s, t)", G)]))
    return files


COMMANDS = {
    "simulate": cmd_simulate,
    "krige": cmd_krige,
    "mcmc": cmd_mcmc,
    "accuracy": cmd_accuracy,
    "st-demo": cmd_st_demo,
}


def manifest_header(command, cfg):
    return (f"sourcerec {__version__} manifest for '{command}'",
            "rerun with: sourcerec " + command + " --config manifest.txt")
