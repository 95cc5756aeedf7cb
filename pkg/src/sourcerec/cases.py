"""Ready-made model setups for the steady and space-time 1-D stream examples and the
space-time Matérn demonstration."""

from __future__ import annotations

from dataclasses import dataclass
from functools import partial

import numpy as np
import scipy.sparse as sp

from .accuracy import SweepCase, interior_weights
from .fem import PdeCoefficients, assemble
from .forward import observation_matrix
from .gmrf import MaternHyper, RegressionDesign, matern_precision, regression_joint_precision
from .mesh import build_interval_mesh


@dataclass(frozen=True)
class SteadyTruth:
    """True parameter values for the steady 1-D stream."""

    alpha: int = 2
    rho: float = 2.0
    D: float = 0.75
    r: float = 0.2
    sigma2_f: float = 10.0
    sigma2_eps: float = 10.0
    sigma2_beta: float = 25.0

    @property
    def v(self):
        return self.sigma2_eps / self.sigma2_f

    @property
    def v_beta(self):
        return self.sigma2_beta / self.sigma2_f


CS1 = SteadyTruth()
CS1_REDUCED = SteadyTruth(D=0.075, r=0.02, sigma2_eps=1.0)

# interior, land-use zone boundaries and coefficients used for simulation
CS1_REGION = (0.0, 50.0)
CS1_ZONES = (17.0, 34.0)
CS1_BETA = (6.0, 1.0, 3.0)


def stream_velocity(coords, length=50.0):
    """Flow speed along the stream: positive everywhere, varying in space."""
    s = coords[:, 0]
    return 1.0 + 0.5 * np.sin(2 * np.pi * s / length)


def land_use(coords, zones=CS1_ZONES):
    """Indicator columns of three consecutive land-use zones."""
    s = coords[:, 0]
    z = np.digitize(s, zones)
    X = np.zeros((s.shape[0], len(zones) + 1))
    X[np.arange(s.shape[0]), z] = 1.0
    return X


def cs1_system(h=0.1, truth: SteadyTruth = CS1, buffer=None, region=CS1_REGION):
    """Mesh and FEM system for the steady stream; buffer defaults to ``3 rho``."""
    buffer = 3 * truth.rho if buffer is None else buffer
    a, b = region
    n = int(round((b - a) / h)) + 1
    nb = int(round(buffer / h))
    mesh = build_interval_mesh(a, b, n + 2 * nb, buffer=nb * h)
    return assemble(mesh, PdeCoefficients(truth.D, truth.r, stream_velocity))


def cs1_design(sys, truth: SteadyTruth = CS1):
    return RegressionDesign(land_use(sys.mesh.coords), v_beta=truth.v_beta, names=["zone1", "zone2", "zone3"])


def cs1_joint_prior(sys, truth: SteadyTruth = CS1, design=None):
    """Prior of the stacked ``(u, beta)`` vector for the steady stream."""
    design = cs1_design(sys, truth) if design is None else design
    fprior = matern_precision(sys, MaternHyper(truth.rho, truth.sigma2_f, truth.alpha))
    return regression_joint_precision(sys, fprior, design, truth.sigma2_f), design


def _locate(mesh, p, locs):
    A = observation_matrix(mesh, locs)
    if p:
        A = sp.hstack([A, sp.csr_matrix((A.shape[0], p))], format="csr")
    return A


def cs1_sweep_case(h=0.1, truth: SteadyTruth = CS1, covariates=True, buffer=None) -> SweepCase:
    """Sweep setup: latent ``(u, beta)`` (or ``u`` alone) under the truth values."""
    sys = cs1_system(h, truth, buffer)
    n = sys.n
    if covariates:
        prior, design = cs1_joint_prior(sys, truth)
        p = design.p
    else:
        from .forward import steady_solution_prior

        fprior = matern_precision(sys, MaternHyper(truth.rho, truth.sigma2_f, truth.alpha))
        prior = steady_solution_prior(sys, fprior)
        p = 0
    Z = sp.csr_matrix((n, p))
    to_u = sp.hstack([sp.identity(n), Z], format="csr")
    to_f = sp.hstack([sys.pushforward(), Z], format="csr")
    return SweepCase(prior, to_u, to_f, interior_weights(sys.mesh), truth.sigma2_eps,
                     partial(_locate, sys.mesh, p), sys.mesh.region)


# ----------------------------------------------------------------------
# space-time


@dataclass(frozen=True)
class SpaceTimeSetup:
    """Geometry and parameters of the space-time stream example."""

    tau: float = 2.0
    kappa: float = 1.0
    alpha: int = 4
    variance: float = 10.0
    D: float = 0.25
    r: float = 0.05
    sigma2_eps: float = 10.0
    region: tuple = (0.0, 50.0)
    buffer: float = 5.0
    n_nodes: int = 101
    dt: float = 0.05
    n_steps: int = 2000
    n_sensors: int = 10
    n_times: int = 20


CS2 = SpaceTimeSetup()


def cs2_system(setup: SpaceTimeSetup = CS2):
    a, b = setup.region
    mesh = build_interval_mesh(a, b, setup.n_nodes, buffer=setup.buffer)
    return assemble(mesh, PdeCoefficients(setup.D, setup.r, stream_velocity))


def cs2_plan(setup: SpaceTimeSetup = CS2):
    """Sensor positions (equidistant over the interior) and sampling times
    (equidistant over the final quarter of the simulated span)."""
    a, b = setup.region
    locs = a + (np.arange(setup.n_sensors) + 0.5) * (b - a) / setup.n_sensors
    t_end = setup.n_steps * setup.dt
    t_start = 0.75 * t_end
    times = np.linspace(t_start, t_end, setup.n_times)
    return locs, times


@dataclass(frozen=True)
class StDemoSetup:
    """Nested-diffusion Matérn demonstration on a long time axis."""

    tau: float = 2.0
    kappa: float = 1.0
    alpha: int = 4
    region: tuple = (0.0, 50.0)
    buffer: float = 15.0
    n_nodes: int = 751
    dt: float = 0.05
    n_steps: int = 10_000


FIG1 = StDemoSetup()


def st_demo_system(setup: StDemoSetup = FIG1):
    a, b = setup.region
    mesh = build_interval_mesh(a, b, setup.n_nodes, buffer=setup.buffer)
    return assemble(mesh, PdeCoefficients(1.0, 0.0, 0.0))
