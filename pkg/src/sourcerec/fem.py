"""Piecewise-linear finite elements for advection-diffusion-reaction.

The weak form of ``div(v u) - D lap(u) + r u = f`` with hat functions
``phi_i`` gives ``K u = L f`` with

* ``A_diff[i, j] = int grad(phi_i) . grad(phi_j)``
* ``A_adv[i, j]  = -int grad(phi_i) . (v phi_j)``  (conservative form)
* ``L[i, j]      = int phi_i phi_j``

and ``K = A_adv + D A_diff + r L``.  The boundary integral left by the
integration by parts is dropped, which imposes zero total flux.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ShapeMismatch, SingularOperator
from .mesh import Mesh
from .sparse import cholesky, lowrank_update


@dataclass(frozen=True)
class PdeCoefficients:
    """Diffusion ``D``, reaction ``r`` and a nodal advection field ``v``.

    ``v`` may be a scalar (constant field in 1-D), a length-``dim``
    constant vector, a ``(n_nodes, dim)`` array or ``None`` for no advection.
    """

    D: float = 0.0
    r: float = 0.0
    v: object = None

    def __post_init__(self):
        if self.D < 0 or self.r < 0:
            raise ValueError("D and r must be non-negative")

    def velocity(self, mesh):
        n, d = mesh.n_nodes, mesh.dim
        if self.v is None:
            return np.zeros((n, d))
        if callable(self.v):
            vel = np.asarray(self.v(mesh.coords), dtype=float)
        else:
            vel = np.asarray(self.v, dtype=float)
        if vel.ndim == 0:
            vel = np.full((n, d), float(vel))
        elif vel.ndim == 1 and vel.shape[0] == d and n != d:
            vel = np.tile(vel, (n, 1))
        elif vel.ndim == 1 and vel.shape[0] == n and d == 1:
            vel = vel[:, None]
        if vel.shape != (n, d):
            raise ShapeMismatch(f"advection field must be ({n}, {d}), got {vel.shape}")
        return vel


@dataclass(frozen=True)
class FemSystem:
    """Assembled matrices for one mesh and one set of coefficients.

    ``parts`` keeps the coefficient-free pieces (``adv``, ``diff``) so that
    ``K`` can be rebuilt cheaply for new ``D`` and ``r``.
    """

    K: sp.csc_matrix
    L: sp.csc_matrix
    Lt: sp.csc_matrix
    mesh: Mesh
    coeffs: PdeCoefficients
    parts: dict = field(repr=False, default_factory=dict)
    bc: str = "neumann"

    @property
    def n(self):
        return self.K.shape[0]

    @property
    def lumped(self):
        """Diagonal of the lumped mass matrix."""
        return self.Lt.diagonal()

    @property
    def G(self):
        """Unit-coefficient diffusion stiffness."""
        return self.parts["diff"]

    def with_coefficients(self, D=None, r=None):
        D = self.coeffs.D if D is None else D
        r = self.coeffs.r if r is None else r
        K = (self.parts["adv"] + D * self.parts["diff"] + r * self.L).tocsc()
        return replace(self, K=K, coeffs=replace(self.coeffs, D=D, r=r))

    def pushforward(self):
        """The map ``u -> f`` that inverts the dynamics: ``L~^{-1} K``."""
        return (sp.diags(1.0 / self.lumped) @ self.K).tocsc()


def _element_geometry(mesh):
    """Cell measures and basis gradients, shape (n_cells, dim+1, dim)."""
    p = mesh.coords[mesh.cells]
    meas = mesh.cell_measures()
    if mesh.dim == 1:
        h = meas
        grads = np.stack([-1.0 / h, 1.0 / h], axis=1)[:, :, None]
        return meas, grads
    x, y = p[..., 0], p[..., 1]
    # grad(phi_k) = [y_{k+1} - y_{k+2}, x_{k+2} - x_{k+1}] / (2 area)
    gx = np.roll(y, -1, axis=1) - np.roll(y, -2, axis=1)
    gy = np.roll(x, -2, axis=1) - np.roll(x, -1, axis=1)
    grads = np.stack([gx, gy], axis=2) / (2.0 * meas)[:, None, None]
    return meas, grads


def _scatter(mesh, local):
    nloc = mesh.dim + 1
    rows = np.repeat(mesh.cells, nloc, axis=1).ravel()
    cols = np.tile(mesh.cells, (1, nloc)).ravel()
    n = mesh.n_nodes
    return sp.csc_matrix((local.ravel(), (rows, cols)), shape=(n, n))


def assemble(mesh, coeffs):
    """Assemble stiffness, consistent mass and lumped mass.

    Mass and advection integrals are exact for a linearly interpolated
    advection field: the local mass matrix is ``meas/((d+1)(d+2)) (1 + delta)``.
    """
    mesh.check()
    d = mesh.dim
    meas, grads = _element_geometry(mesh)
    nloc = d + 1
    eye = np.eye(nloc)
    mloc = (meas / ((d + 1) * (d + 2)))[:, None, None] * (1.0 + eye)[None]

    diff_loc = meas[:, None, None] * np.einsum("eak,ebk->eab", grads, grads)
    vel = coeffs.velocity(mesh)[mesh.cells]                 # (e, k, dim)
    # w[e, b, :] = int v phi_b over the cell
    w = np.einsum("ekc,ekb->ebc", vel, mloc)
    adv_loc = -np.einsum("eac,ebc->eab", grads, w)

    L = _scatter(mesh, mloc)
    A_diff = _scatter(mesh, diff_loc)
    A_adv = _scatter(mesh, adv_loc)
    for M in (L, A_diff, A_adv):
        M.sum_duplicates()
        M.sort_indices()
    # the diffusion matrix is symmetric by construction; make it exactly so
    A_diff = ((A_diff + A_diff.T) * 0.5).tocsc()
    L = ((L + L.T) * 0.5).tocsc()
    Lt = sp.diags(np.asarray(L.sum(axis=1)).ravel()).tocsc()
    K = (A_adv + coeffs.D * A_diff + coeffs.r * L).tocsc()
    return FemSystem(K, L, Lt, mesh, coeffs, {"adv": A_adv, "diff": A_diff})


# ----------------------------------------------------------------------
# Dirichlet condensation

@dataclass(frozen=True)
class CondensedSystem:
    """Interior system ``K22 u2 = M22 (f2 + g)`` left after fixing boundary values.

    ``g = -L~22^{-1} K21 c`` is the effective source contributed by the
    boundary values ``c``.  For a constant ``c`` only its mean survives,
    stored as the right-hand-side offset ``rhs_offset = -K21 c`` and the
    solution offset ``u_offset = K22^{-1} rhs_offset``.
    """

    K: sp.csc_matrix
    Lt: sp.csc_matrix
    K21: sp.csc_matrix
    free: np.ndarray
    fixed: np.ndarray
    c: np.ndarray
    rhs_offset: np.ndarray
    u_offset: np.ndarray
    Qc: sp.csc_matrix | None = None
    mass: str = "lumped"

    @property
    def n(self):
        return self.K.shape[0]

    @property
    def lumped(self):
        return self.Lt.diagonal()

    def pushforward(self):
        return (sp.diags(1.0 / self.lumped) @ self.K).tocsc()

    def source_coupling(self):
        """``Gm = -L~22^{-1} K21``: boundary values to effective source."""
        return -(sp.diags(1.0 / self.lumped) @ self.K21).tocsc()

    def solve(self, f2):
        """Interior solution for an interior source vector."""
        rhs = self.Lt @ np.asarray(f2, dtype=float) + self.rhs_offset
        return spla.splu(self.K.tocsc()).solve(rhs)

    def expand(self, u2):
        """Full nodal vector with the boundary values filled in."""
        n = self.free.size + self.fixed.size
        out = np.empty(n)
        out[self.free] = u2
        out[self.fixed] = self.c
        return out

    def effective_source_precision(self, Qf2):
        """Precision of ``f2 + g`` when the boundary values are Gaussian.

        Returns ``(Q, factor)`` where ``Q = Qf2 - Qf2 Gm (Qc + Gm^T Qf2 Gm)^{-1}
        Gm^T Qf2`` and ``factor`` is its Cholesky factor obtained by a
        low-rank downdate of the factor of ``Qf2``.
        """
        Qf2 = sp.csc_matrix(Qf2)
        F = cholesky(Qf2)
        if self.Qc is None:
            return Qf2, F
        Gm = self.source_coupling()
        QG = (Qf2 @ Gm).toarray()
        S = self.Qc.toarray() + Gm.T @ QG
        # S = C C^T, so W = QG C^{-T} gives W W^T = QG S^{-1} QG^T
        C = np.linalg.cholesky(S)
        W = np.linalg.solve(C, QG.T).T
        W[np.abs(W) < 1e-300] = 0.0
        Wsp = sp.csc_matrix(W)
        Q = (Qf2 - Wsp @ Wsp.T).tocsc()
        return Q, lowrank_update(F, Wsp, "-")


def apply_dirichlet(sys, boundary_value, nodes=None, Qc=None, mass="lumped"):
    """Condense fixed-value boundary nodes out of an assembled system.

    Parameters
    ----------
    sys : FemSystem
    boundary_value : array_like or float
        Boundary values ``c`` (the mean of ``c`` when ``Qc`` is given).
    nodes : array_like of int, optional
        Fixed nodes; defaults to the mesh boundary.
    Qc : sparse, optional
        Precision of a Gaussian boundary field.
    mass : {"lumped", "consistent"}
        Mass block returned for the interior right-hand side.  The lumped
        choice makes ``L21 = 0``; with the consistent block the boundary
        source contribution ``L21 f1`` is dropped.
    """
    n = sys.n
    fixed = np.asarray(sys.mesh.boundary if nodes is None else nodes, dtype=np.int64)
    c = np.broadcast_to(np.asarray(boundary_value, dtype=float), fixed.shape).copy() \
        if np.ndim(boundary_value) == 0 else np.asarray(boundary_value, dtype=float)
    if c.shape != fixed.shape:
        raise ShapeMismatch(f"{fixed.size} boundary nodes but {c.size} boundary values")
    if Qc is not None:
        Qc = sp.csc_matrix(Qc)
        if Qc.shape != (fixed.size, fixed.size):
            raise ShapeMismatch("boundary precision has the wrong size")
    free = np.setdiff1d(np.arange(n), fixed)
    K = sys.K.tocsr()
    K22 = K[free][:, free].tocsc()
    K21 = K[free][:, fixed].tocsc()
    if mass == "lumped":
        M22 = sys.Lt.tocsr()[free][:, free].tocsc()
    elif mass == "consistent":
        M22 = sys.L.tocsr()[free][:, free].tocsc()
    else:
        raise ValueError(f"unknown mass option {mass!r}")
    rhs_offset = -(K21 @ c)
    if np.any(rhs_offset):
        try:
            u_offset = spla.splu(K22).solve(rhs_offset)
        except RuntimeError as exc:
            raise SingularOperator(str(exc)) from exc
    else:
        u_offset = np.zeros(free.size)
    return CondensedSystem(K22, M22, K21, free, fixed, c, rhs_offset, u_offset, Qc, mass)
