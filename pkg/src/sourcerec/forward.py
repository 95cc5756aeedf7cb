"""Forward model: solution priors, backward Euler operator, observations."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import InvalidStep, LocationOutsideMesh, ShapeMismatch, SingularOperator
from .fem import CondensedSystem
from .gmrf import GmrfPrior


def _splu(M, rtol=1e-12):
    try:
        lu = spla.splu(sp.csc_matrix(M))
    except RuntimeError as exc:
        raise SingularOperator(f"operator is singular: {exc}") from exc
    d = np.abs(lu.U.diagonal())
    if d.size and d.min() <= rtol * d.max():
        # e.g. zero-flux boundaries with no decay conserve mass: 1^T K = 0
        raise SingularOperator("operator is numerically singular")
    return lu


def steady_solution_prior(sys, f_prior):
    """Prior of ``u`` solving ``K u = L~ f``.

    ``Q_u = K^T L~^{-1} Q_f L~^{-1} K`` and ``mean = K^{-1} L~ mu_f`` (plus
    the boundary offset of a condensed system).
    """
    if f_prior.n != sys.n:
        raise ShapeMismatch(f"source prior has dimension {f_prior.n}, system {sys.n}")
    B = sys.pushforward()
    Q = (B.T @ f_prior.Q @ B).tocsc()
    Q = ((Q + Q.T) * 0.5).tocsc()
    lu = _splu(sys.K)
    mean = lu.solve(sys.Lt @ f_prior.mean) if np.any(f_prior.mean) else np.zeros(sys.n)
    if isinstance(sys, CondensedSystem):
        mean = mean + sys.u_offset

    def sampler(rng, size=None):
        f = f_prior.sample(rng, size)
        u = lu.solve(np.asarray(sys.Lt @ f))
        if isinstance(sys, CondensedSystem):
            u = u + (sys.u_offset if size is None else sys.u_offset[:, None])
        return u

    prior = GmrfPrior(Q, mean, f_prior.ordering)
    prior.solver = lu
    prior.pushforward_sampler = sampler
    return prior


def solve_steady(sys, f):
    """Nodal solution for a source vector (or matrix of source columns)."""
    lu = _splu(sys.K)
    u = lu.solve(np.asarray(sys.Lt @ f))
    if isinstance(sys, CondensedSystem):
        u = u + (sys.u_offset if np.ndim(f) == 1 else sys.u_offset[:, None])
    return u


class SpaceTimeOperator:
    """Backward Euler propagation of ``du/dt + K(t) u = f`` with ``u_0 = 0``.

    Unknowns are stacked time-major: entry ``(k - 1) * n_space + i`` holds
    node ``i`` at step ``k = 1..n_steps``.  ``R`` is the block-bidiagonal
    inverse of the propagator::

        R = (1/dt) [[M_1^{-1}            ],
                    [ -I   M_2^{-1}      ],
                    [        ...   ...   ]]

    with ``M_i^{-1} = I + dt L~^{-1} K_i``.  Internally each step solves
    the equivalent ``(L~ + dt K_i) u_i = L~ (u_{i-1} + dt f_i)``.
    """

    def __init__(self, systems, dt, n_steps, t0=0.0):
        if not dt > 0:
            raise InvalidStep("time step must be positive")
        if n_steps < 1:
            raise InvalidStep("need at least one time step")
        self.dt = float(dt)
        self.n_steps = int(n_steps)
        self.t0 = float(t0)
        if not isinstance(systems, (list, tuple)):
            systems = [systems]
        if len(systems) not in (1, self.n_steps):
            raise ShapeMismatch("give one system or one system per step")
        self.systems = list(systems)
        self.mesh = getattr(systems[0], "mesh", None)
        self.lumped = np.asarray(systems[0].lumped, dtype=float)
        self.n_space = self.lumped.shape[0]
        for s in self.systems:
            if s.n != self.n_space:
                raise ShapeMismatch("all per-step systems must share the mesh")
        self._lu = {}
        self._R = None

    @property
    def n(self):
        return self.n_space * self.n_steps

    @property
    def times(self):
        return self.t0 + self.dt * np.arange(1, self.n_steps + 1)

    def system(self, k):
        """System used for step ``k`` (0-based)."""
        return self.systems[0] if len(self.systems) == 1 else self.systems[k]

    def step_inverse(self, k):
        """``M_k^{-1} = I + dt L~^{-1} K_k``."""
        Ci = sp.diags(1.0 / self.lumped)
        return (sp.identity(self.n_space) + self.dt * (Ci @ self.system(k).K)).tocsc()

    @property
    def R(self):
        if self._R is None:
            ns, nt = self.n_space, self.n_steps
            if len(self.systems) == 1:
                diag = sp.kron(sp.identity(nt), self.step_inverse(0))
            else:
                diag = sp.block_diag([self.step_inverse(k) for k in range(nt)])
            sub = sp.kron(sp.eye(nt, k=-1), sp.identity(ns))
            self._R = ((diag - sub) / self.dt).tocsc()
        return self._R

    def _solver(self, k):
        s = self.system(k)
        key = id(s)
        if key not in self._lu:
            self._lu[key] = _splu(sp.diags(self.lumped) + self.dt * s.K)
        return self._lu[key]

    def integrate(self, f, u0=None):
        """Stacked solution for a stacked source (vector or n x k array)."""
        f = np.asarray(f, dtype=float)
        vec = f.ndim == 1
        F = f.reshape(self.n_steps, self.n_space, -1)
        out = np.empty_like(F)
        u = np.zeros(F.shape[1:]) if u0 is None else np.asarray(u0, dtype=float).reshape(self.n_space, -1)
        lt = self.lumped[:, None]
        for k in range(self.n_steps):
            u = self._solver(k).solve(lt * (u + self.dt * F[k]))
            out[k] = u
        out = out.reshape(self.n, -1)
        return out[:, 0] if vec else out


def build_spacetime_operator(systems, dt, n_steps, t0=0.0):
    """Backward Euler operator for one system (constant in time) or a list
    of per-step systems (time-varying coefficients)."""
    return SpaceTimeOperator(systems, dt, n_steps, t0)


def spacetime_solution_prior(op, f_prior):
    """Prior of the stacked solution: ``Q_u = R^T Q_f R``, mean ``R^{-1} mu_f``."""
    if f_prior.n != op.n:
        raise ShapeMismatch(f"source prior has dimension {f_prior.n}, operator {op.n}")
    R = op.R
    Q = (R.T @ f_prior.Q @ R).tocsc()
    Q = ((Q + Q.T) * 0.5).tocsc()
    mean = op.integrate(f_prior.mean) if np.any(f_prior.mean) else np.zeros(op.n)
    prior = GmrfPrior(Q, mean, ordering="natural")

    def sampler(rng, size=None):
        return op.integrate(f_prior.sample(rng, size))

    prior.pushforward_sampler = sampler
    return prior


# ----------------------------------------------------------------------
# observations

@dataclass
class ObservationSet:
    """``y = A u + eps`` with ``eps ~ N(0, sigma2 I)``."""

    A: sp.csr_matrix
    y: np.ndarray
    sigma2: float
    locations: np.ndarray | None = None
    times: np.ndarray | None = None

    def __post_init__(self):
        self.A = sp.csr_matrix(self.A, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=float).ravel()
        if self.A.shape[0] != self.y.shape[0]:
            raise ShapeMismatch(f"A has {self.A.shape[0]} rows but y has {self.y.shape[0]} values")
        if self.sigma2 < 0:
            raise ValueError("noise variance must be non-negative")

    @property
    def m(self):
        return self.y.shape[0]


def _barycentric_1d(x_nodes, pts):
    x = np.asarray(pts, dtype=float).ravel()
    lo, hi = x_nodes[0], x_nodes[-1]
    tol = 1e-12 * (hi - lo)
    if np.any(x < lo - tol) or np.any(x > hi + tol):
        raise LocationOutsideMesh("observation location outside the mesh")
    j = np.clip(np.searchsorted(x_nodes, x, side="right") - 1, 0, x_nodes.size - 2)
    w = (x - x_nodes[j]) / (x_nodes[j + 1] - x_nodes[j])
    w = np.clip(w, 0.0, 1.0)
    cols = np.column_stack([j, j + 1])
    vals = np.column_stack([1.0 - w, w])
    return cols, vals


def _barycentric_2d(mesh, pts, chunk=256):
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    P = mesh.coords[mesh.cells]                       # (e, 3, 2)
    v0 = P[:, 0]
    T = np.stack([P[:, 1] - v0, P[:, 2] - v0], axis=2)  # (e, 2, 2)
    Tinv = np.linalg.inv(T)
    cols = np.empty((pts.shape[0], 3), dtype=np.int64)
    vals = np.empty((pts.shape[0], 3))
    for s in range(0, pts.shape[0], chunk):
        q = pts[s:s + chunk]
        lam12 = np.einsum("eij,pej->pei", Tinv, q[:, None, :] - v0[None])
        lam = np.concatenate([1 - lam12.sum(axis=2, keepdims=True), lam12], axis=2)
        worst = lam.min(axis=2)
        e = np.argmax(worst, axis=1)
        if np.any(worst[np.arange(q.shape[0]), e] < -1e-10):
            raise LocationOutsideMesh("observation location outside the mesh")
        cols[s:s + chunk] = mesh.cells[e]
        vals[s:s + chunk] = np.clip(lam[np.arange(q.shape[0]), e], 0.0, 1.0)
    vals /= vals.sum(axis=1, keepdims=True)
    return cols, vals


def observation_matrix(mesh, locations, times=None, op=None):
    """Interpolation operator for point observations.

    Spatial weights are barycentric on the containing cell.  With ``times``
    and a :class:`SpaceTimeOperator`, values are linearly interpolated
    between the two neighbouring steps; times must lie in
    ``[t0 + dt, t0 + n_steps dt]``.
    """
    if mesh.dim == 1:
        cols, vals = _barycentric_1d(mesh.x, locations)
    else:
        cols, vals = _barycentric_2d(mesh, locations)
    m = cols.shape[0]
    if times is None:
        rows = np.repeat(np.arange(m), cols.shape[1])
        A = sp.csr_matrix((vals.ravel(), (rows, cols.ravel())), shape=(m, mesh.n_nodes))
        A.sum_duplicates()
        return A
    if op is None:
        raise ShapeMismatch("time interpolation needs a space-time operator")
    t = np.asarray(times, dtype=float).ravel()
    if t.shape[0] != m:
        raise ShapeMismatch("need one time per location")
    s = (t - op.t0) / op.dt - 1.0                    # fractional 0-based step
    if np.any(s < -1e-9) or np.any(s > op.n_steps - 1 + 1e-9):
        raise LocationOutsideMesh("observation time outside the simulated window")
    s = np.clip(s, 0.0, op.n_steps - 1)
    k = np.minimum(np.floor(s).astype(np.int64), op.n_steps - 2) if op.n_steps > 1 else np.zeros(m, np.int64)
    wt = s - k
    ns = op.n_space
    rows, cs, vs = [], [], []
    for part, weight in ((k, 1.0 - wt), (k + 1, wt)):
        if op.n_steps == 1 and part is not k:
            continue
        rows.append(np.repeat(np.arange(m), cols.shape[1]))
        cs.append((part[:, None] * ns + cols).ravel())
        vs.append((weight[:, None] * vals).ravel())
    A = sp.csr_matrix((np.concatenate(vs), (np.concatenate(rows), np.concatenate(cs))), shape=(m, op.n))
    A.sum_duplicates()
    A.eliminate_zeros()
    return A


def simulate(f_prior, model, locations, sigma2, seed=None, times=None, rng=None):
    """Draw a source, solve for the solution and observe it with noise.

    Parameters
    ----------
    f_prior : GmrfPrior
        Source prior (stacked for a space-time model).
    model : FemSystem, CondensedSystem or SpaceTimeOperator
    locations : array_like
        Observation coordinates.
    sigma2 : float
        Noise variance; 0 gives exact observations.
    seed : int, optional
        Seed for ``numpy.random.default_rng`` (ignored if ``rng`` given).
    times : array_like, optional
        Observation times for a space-time model.

    Returns
    -------
    f, u, ObservationSet
    """
    rng = np.random.default_rng(seed) if rng is None else rng
    f = f_prior.sample(rng)
    if isinstance(model, SpaceTimeOperator):
        u = model.integrate(f)
        A = observation_matrix(model.mesh, locations, times, model)
    else:
        if isinstance(model, CondensedSystem):
            raise ShapeMismatch("simulate needs the full system, not a condensed one")
        u = solve_steady(model, f)
        A = observation_matrix(model.mesh, locations)
    noise = np.sqrt(sigma2) * rng.standard_normal(A.shape[0]) if sigma2 > 0 else np.zeros(A.shape[0])
    y = A @ u + noise
    return f, u, ObservationSet(A, y, sigma2, np.asarray(locations), None if times is None else np.asarray(times))
