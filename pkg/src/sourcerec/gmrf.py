"""Gaussian Markov random field priors built from finite element matrices.

Spatial Matérn fields follow the SPDE route ``(kappa^2 - Laplace)^{alpha/2} x
= W / tau`` with white noise projected through the lumped mass matrix.  The
space-time source solves the nested diffusion equation
``(tau d/dt + kappa^2 - Laplace)^{alpha/2} x = W`` with backward Euler
steps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.special import gamma as gamma_fn

from .errors import InvalidStep, ShapeMismatch, UnsupportedAlpha
from .fem import FemSystem, PdeCoefficients, assemble
from .mesh import Mesh
from .sparse import cholesky


class GmrfPrior:
    """Gaussian vector with mean ``mean`` and sparse precision ``Q``.

    The Cholesky factor is computed on first use and cached.  ``ordering``
    is passed to :func:`sourcerec.sparse.cholesky`.
    """

    def __init__(self, Q, mean=None, ordering="amd", sampler=None):
        Q = sp.csc_matrix(Q, dtype=np.float64)
        if Q.shape[0] != Q.shape[1]:
            raise ShapeMismatch("precision must be square")
        self.Q = Q
        n = Q.shape[0]
        self.mean = np.zeros(n) if mean is None else np.asarray(mean, dtype=float)
        if self.mean.shape != (n,):
            raise ShapeMismatch(f"mean has length {self.mean.shape[0]}, precision has dimension {n}")
        self.ordering = ordering
        self._sampler = sampler
        self._factor = None

    def __getstate__(self):
        # attached LU solvers and closures stay in the owning process
        state = self.__dict__.copy()
        for key in ("solver", "pushforward_sampler"):
            state.pop(key, None)
        return state

    @property
    def n(self):
        return self.Q.shape[0]

    @property
    def factor(self):
        if self._factor is None:
            self._factor = cholesky(self.Q, self.ordering)
        return self._factor

    def with_factor(self, F):
        self._factor = F
        return self

    def scaled(self, c):
        """Prior with precision ``c * Q`` (variance divided by ``c``)."""
        return GmrfPrior(c * self.Q, self.mean, self.ordering)

    def sample(self, rng, size=None):
        """Draw from the prior.  ``size`` adds a trailing sample axis."""
        if self._sampler is not None:
            return self._sampler(rng, size)
        z = self.factor.sample(rng, size)
        return z + (self.mean if size is None else self.mean[:, None])

    def marginal_variances(self):
        return self.factor.marginal_variances()

    def precision_dense(self):
        return self.Q.toarray()


@dataclass(frozen=True)
class MaternHyper:
    """Range, marginal variance and even SPDE exponent of a Matérn field.

    ``kappa = sqrt(8 nu) / rho`` with ``nu = alpha - d/2``.
    """

    rho: float
    variance: float
    alpha: int = 2

    def __post_init__(self):
        if not (self.rho > 0 and self.variance > 0):
            raise ValueError("range and variance must be positive")
        if self.alpha not in (2, 4):
            raise UnsupportedAlpha(f"alpha must be 2 or 4, got {self.alpha}")

    def nu(self, d):
        return self.alpha - d / 2.0

    def kappa(self, d):
        return np.sqrt(8.0 * self.nu(d)) / self.rho

    def tau2(self, d):
        """Precision scale giving marginal variance ``variance``."""
        return matern_tau2(self.kappa(d), self.alpha, d, self.variance)


def matern_tau2(kappa, alpha, d, variance):
    # sigma^2 = Gamma(nu) / (Gamma(alpha) (4 pi)^{d/2} kappa^{2 nu} tau^2)
    nu = alpha - d / 2.0
    return gamma_fn(nu) / (gamma_fn(alpha) * (4 * np.pi) ** (d / 2.0) * kappa ** (2 * nu) * variance)


def matern_correlation(h, rho, nu):
    """Matérn correlation at distance ``h`` with ``kappa = sqrt(8 nu)/rho``."""
    from scipy.special import kv

    h = np.asarray(h, dtype=float)
    k = np.sqrt(8.0 * nu) / rho
    x = np.where(h > 0, k * h, 1.0)
    c = 2.0 ** (1 - nu) / gamma_fn(nu) * x**nu * kv(nu, x)
    return np.where(h > 0, c, 1.0)


def _diffusion_parts(sys_or_mesh):
    if isinstance(sys_or_mesh, Mesh):
        sys_or_mesh = assemble(sys_or_mesh, PdeCoefficients(D=1.0))
    G = sys_or_mesh.G if isinstance(sys_or_mesh, FemSystem) else sys_or_mesh.parts["diff"]
    return sys_or_mesh, sp.csc_matrix(G), np.asarray(sys_or_mesh.lumped, dtype=float)


def matern_operator(G, lumped, kappa):
    return (kappa**2 * sp.diags(lumped) + G).tocsc()


def matern_precision(sys, hyper, mean=None):
    """Sparse Matérn precision on the nodes of ``sys``.

    ``alpha = 2`` gives ``tau^2 K C^{-1} K`` with ``K = kappa^2 C + G`` and
    ``C`` the lumped mass; ``alpha = 4`` gives ``tau^2 K C^{-1} K C^{-1} K
    C^{-1} K``.
    """
    sys, G, lumped = _diffusion_parts(sys)
    d = sys.mesh.dim
    kappa = hyper.kappa(d)
    K = matern_operator(G, lumped, kappa)
    Ci = sp.diags(1.0 / lumped)
    if hyper.alpha == 2:
        Q = K @ Ci @ K
    elif hyper.alpha == 4:
        KCK = K @ Ci @ K
        Q = KCK @ Ci @ KCK
    else:
        raise UnsupportedAlpha(f"alpha must be 2 or 4, got {hyper.alpha}")
    Q = hyper.tau2(d) * Q
    Q = ((Q + Q.T) * 0.5).tocsc()
    return GmrfPrior(Q, mean)


# ----------------------------------------------------------------------
# regression on covariates

@dataclass
class RegressionDesign:
    """Covariates ``X`` (nodes x p), coefficient prior precision structure
    ``Q_beta`` and variance ratio ``v_beta = sigma^2_beta / sigma^2_f``."""

    X: np.ndarray
    Q_beta: sp.spmatrix = None
    v_beta: float = 1.0
    names: list = field(default_factory=list)

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        p = self.X.shape[1]
        self.Q_beta = sp.identity(p, format="csc") if self.Q_beta is None else sp.csc_matrix(self.Q_beta)
        if self.Q_beta.shape != (p, p):
            raise ShapeMismatch("Q_beta must be p x p")
        if not self.v_beta > 0:
            raise ValueError("v_beta must be positive")

    @property
    def p(self):
        return self.X.shape[1]


def regression_joint_precision(sys, prior, design, source_variance=1.0):
    """Prior precision of the stacked vector ``(u, beta)``.

    With ``f = X beta + eta``, ``eta ~ N(0, Q^{-1})``, ``K u = L~ f`` and
    ``beta ~ N(0, sigma^2_f v_beta Q_beta^{-1})``::

        [[ B^T Q B,   -B^T Q X                          ],
         [ -X^T Q B,   Q_beta / (sigma^2_f v_beta) + X^T Q X ]]

    where ``B = L~^{-1} K``.  ``source_variance`` is ``sigma^2_f``.
    """
    n = sys.n
    X = design.X
    if X.shape[0] != n:
        raise ShapeMismatch(f"X has {X.shape[0]} rows, system has {n} nodes")
    if prior.n != n:
        raise ShapeMismatch("prior dimension differs from the system")
    B = sys.pushforward()
    Q = prior.Q
    Quu = (B.T @ Q @ B).tocsc()
    if design.p == 0:
        return GmrfPrior(Quu)
    QX = Q @ X
    Qub = -(B.T @ QX)
    Qbb = design.Q_beta.toarray() / (source_variance * design.v_beta) + X.T @ QX
    J = sp.bmat([[Quu, sp.csc_matrix(Qub)], [sp.csc_matrix(Qub.T), sp.csc_matrix(Qbb)]], format="csc")
    J = ((J + J.T) * 0.5).tocsc()
    return GmrfPrior(J)


# ----------------------------------------------------------------------
# nested-diffusion space-time source

def _st_checks(alpha, dt, n_steps, tau):
    if alpha not in (2, 4):
        raise UnsupportedAlpha(f"alpha must be 2 or 4 for the space-time source, got {alpha}")
    if not dt > 0 or n_steps < 1:
        raise InvalidStep("need dt > 0 and at least one step")
    if not tau > 0:
        raise InvalidStep("time constant tau must be positive")


def st_stationary_variance(tau, kappa, alpha, d):
    """Marginal variance of the stationary nested-diffusion field.

    The stationary spatial field is Matérn with SPDE exponent ``alpha - 1``
    and the same ``kappa``.
    """
    n = alpha // 2
    m = alpha - 1
    time_part = np.sqrt(np.pi) / tau * gamma_fn(n - 0.5) / gamma_fn(n) / (2 * np.pi)
    space_part = gamma_fn(m - d / 2.0) / ((4 * np.pi) ** (d / 2.0) * gamma_fn(m) * kappa ** (2 * m - d))
    return time_part * space_part


def st_step_matrix(sys, tau, kappa, dt):
    """``I + (dt/tau) L~^{-1} (kappa^2 L~ + G)``, the per-step operator."""
    _, G, lumped = _diffusion_parts(sys)
    K = matern_operator(G, lumped, kappa)
    n = lumped.shape[0]
    return (sp.identity(n) + (dt / tau) * sp.diags(1.0 / lumped) @ K).tocsc()


def st_matern_source(sys, tau, kappa, alpha, dt, n_steps, variance=None):
    """Precision of the stacked (time-major) nested-diffusion source.

    ``Q = tau^{2n} dt (R_s^T)^n (I kron L~) R_s^n`` with ``alpha = 2n`` and
    ``R_s = (1/dt) bidiag(I + (dt/tau) L~^{-1}(kappa^2 L~ + G), -I)``.  The
    stacked index of node ``i`` at step ``k`` (1-based steps) is
    ``(k - 1) * n_space + i``.  With ``variance`` set, ``Q`` is rescaled so
    the nominal stationary marginal variance equals it.
    """
    _st_checks(alpha, dt, n_steps, tau)
    sysx, G, lumped = _diffusion_parts(sys)
    d = sysx.mesh.dim
    A = st_step_matrix(sysx, tau, kappa, dt)
    ns = lumped.shape[0]
    It = sp.identity(n_steps, format="csc")
    sub = sp.eye(n_steps, k=-1, format="csc")
    Rs = ((sp.kron(It, A) - sp.kron(sub, sp.identity(ns))) / dt).tocsc()
    n = alpha // 2
    Rn = Rs
    for _ in range(n - 1):
        Rn = (Rn @ Rs).tocsc()
    Lam = sp.kron(It, sp.diags(lumped)).tocsc()
    Q = tau ** (2 * n) * dt * (Rn.T @ Lam @ Rn)
    if variance is not None:
        Q = Q * (st_stationary_variance(tau, kappa, alpha, d) / variance)
    Q = ((Q + Q.T) * 0.5).tocsc()
    scale = 1.0 if variance is None else st_stationary_variance(tau, kappa, alpha, d) / variance

    def sampler(rng, size=None):
        k = 1 if size is None else int(size)
        out = np.empty((n_steps * ns, k))
        for step, x in enumerate(iterate_st_matern(sysx, tau, kappa, alpha, dt, n_steps, rng, k)):
            out[step * ns:(step + 1) * ns] = x
        out /= np.sqrt(scale)
        return out[:, 0] if size is None else out

    prior = GmrfPrior(Q, ordering="natural", sampler=sampler)
    prior.dynamics = NestedDiffusionDynamics(sysx, tau, kappa, alpha, dt, n_steps, scale)
    return prior


@dataclass(frozen=True)
class NestedDiffusionDynamics:
    """Markov form of the nested-diffusion source.

    The stage vector ``z_k = (x^1_k, ..., x^n_k)`` obeys
    ``z_k = T z_{k-1} + E e_k`` with ``e_k ~ N(0, dt L~ / scale)``; the
    last stage is the source at step ``k``.
    """

    sys: object
    tau: float
    kappa: float
    alpha: int
    dt: float
    n_steps: int
    scale: float = 1.0

    @property
    def stages(self):
        return self.alpha // 2

    def matrices(self):
        """Dense ``(T, E, noise_cov)``."""
        _, G, lumped = _diffusion_parts(self.sys)
        ns = lumped.shape[0]
        S = (self.tau * sp.diags(lumped) + self.dt * matern_operator(G, lumped, self.kappa)).toarray()
        Si = np.linalg.inv(S)
        Phi = Si * (self.tau * lumped)[None, :]
        Psi = Si * (self.dt * lumped)[None, :]
        n = self.stages
        T = np.zeros((n * ns, n * ns))
        E = np.zeros((n * ns, ns))
        T[:ns, :ns] = Phi
        E[:ns] = Si
        for s in range(1, n):
            rows, prev = slice(s * ns, (s + 1) * ns), slice((s - 1) * ns, s * ns)
            T[rows] = Psi @ T[prev]
            T[rows, rows] += Phi
            E[rows] = Psi @ E[prev]
        return T, E, np.diag(self.dt * lumped / self.scale)


def iterate_st_matern(sys, tau, kappa, alpha, dt, n_steps, rng, n_samples=1):
    """Yield successive time slices (n_space x n_samples) of the nested field.

    Each stage solves ``(tau L~ + dt K) x_k = tau L~ x_{k-1} + load_k`` with
    ``K = kappa^2 L~ + G``.  The first stage is forced by projected white
    noise ``N(0, dt L~)``; each further stage is forced by ``dt L~ z_k``
    where ``z_k`` is the previous stage at the same step.  Initial state 0.
    """
    _st_checks(alpha, dt, n_steps, tau)
    _, G, lumped = _diffusion_parts(sys)
    ns = lumped.shape[0]
    K = matern_operator(G, lumped, kappa)
    S = (tau * sp.diags(lumped) + dt * K).tocsc()
    F = cholesky(S)
    stages = alpha // 2
    state = [np.zeros((ns, n_samples)) for _ in range(stages)]
    noise_sd = np.sqrt(dt * lumped)[:, None]
    tl = tau * lumped[:, None]
    for _ in range(n_steps):
        load = noise_sd * rng.standard_normal((ns, n_samples))
        for s in range(stages):
            if s > 0:
                load = dt * lumped[:, None] * state[s - 1]
            state[s] = F.solve(tl * state[s] + load)
        yield state[-1]
