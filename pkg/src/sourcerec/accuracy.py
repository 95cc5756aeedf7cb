"""Reconstruction error: exact interior L2, its trace approximation, and
the local convergence rate in the data-density parameter ``zeta``.

With ``n`` replications of an observation pattern ``A`` (``m`` rows),
``zeta = log(m n)`` and the posterior covariance is
``Sigma(zeta) = (Q + exp(zeta) / (m sigma2) A^T A)^{-1}``.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import ShapeMismatch
from .mesh import Mesh
from .sparse import cholesky, lowrank_update, selected_trace

# ----------------------------------------------------------------------
# interior weights


@dataclass(frozen=True)
class InteriorWeights:
    """Share of each hat function lying inside the region of interest.

    Attributes
    ----------
    fractions : ndarray
        ``int_Omega phi_i / int phi_i``, in ``[0, 1]``.
    volume : float
        Measure ``V`` of the region.
    mass : sparse matrix
        Consistent mass matrix restricted to the region,
        ``int_Omega phi_i phi_j``.
    """

    fractions: np.ndarray
    volume: float
    mass: sp.csr_matrix = field(repr=False)

    @property
    def n(self):
        return self.fractions.shape[0]

    @property
    def M(self):
        return float(self.fractions.sum())

    @property
    def I_int(self):
        return sp.diags(self.fractions, format="csr")


def _clip_halfplane(poly, axis, bound, keep_above):
    """Sutherland-Hodgman clip of a polygon against ``x[axis] >= bound`` (or <=)."""
    out = []
    k = len(poly)
    for i in range(k):
        p, q = poly[i], poly[(i + 1) % k]
        pin = p[axis] >= bound if keep_above else p[axis] <= bound
        qin = q[axis] >= bound if keep_above else q[axis] <= bound
        if pin:
            out.append(p)
        if pin != qin:
            t = (bound - p[axis]) / (q[axis] - p[axis])
            out.append(p + t * (q - p))
    return out


def _clipped_simplices(verts, region, dim):
    """Sub-simplices of a cell intersected with the region (list of vertex arrays)."""
    if dim == 1:
        a, b = region
        lo, hi = max(verts[:, 0].min(), a), min(verts[:, 0].max(), b)
        return [np.array([[lo], [hi]])] if hi > lo else []
    (x0, x1), (y0, y1) = region
    poly = [v for v in verts]
    for axis, bound, above in ((0, x0, True), (0, x1, False), (1, y0, True), (1, y1, False)):
        poly = _clip_halfplane(poly, axis, bound, above)
        if len(poly) < 3:
            return []
    return [np.array([poly[0], poly[i], poly[i + 1]]) for i in range(1, len(poly) - 1)]


def _simplex_measure(v, dim):
    if dim == 1:
        return abs(v[1, 0] - v[0, 0])
    e1, e2 = v[1] - v[0], v[2] - v[0]
    return 0.5 * abs(e1[0] * e2[1] - e1[1] * e2[0])


def _barycentric(parent, pts):
    """Barycentric coordinates of ``pts`` (rows) in the simplex ``parent``."""
    T = np.vstack([parent.T, np.ones(parent.shape[0])])
    rhs = np.vstack([pts.T, np.ones(pts.shape[0])])
    return np.linalg.solve(T, rhs).T


def interior_weights(mesh: Mesh) -> InteriorWeights:
    """Exact fractions and interior mass by clipping cells to the region."""
    d = mesh.dim
    n = mesh.n_nodes
    P = mesh.coords[mesh.cells]
    meas = np.abs(mesh.cell_measures())
    region = mesh.region
    if d == 1:
        lo, hi = P[:, :, 0].min(axis=1), P[:, :, 0].max(axis=1)
        a, b = region
        inside = (lo >= a) & (hi <= b)
        outside = (hi <= a) | (lo >= b)
    else:
        (x0, x1), (y0, y1) = region
        lo, hi = P.min(axis=1), P.max(axis=1)
        inside = (lo[:, 0] >= x0) & (hi[:, 0] <= x1) & (lo[:, 1] >= y0) & (hi[:, 1] <= y1)
        outside = (hi[:, 0] <= x0) | (lo[:, 0] >= x1) | (hi[:, 1] <= y0) | (lo[:, 1] >= y1)

    total = np.zeros(n)
    np.add.at(total, mesh.cells.ravel(), np.repeat(meas / (d + 1), d + 1))

    part = np.zeros(n)
    rows, cols, vals = [], [], []
    ref = (np.ones((d + 1, d + 1)) + np.eye(d + 1)) / ((d + 1) * (d + 2))
    full = mesh.cells[inside]
    np.add.at(part, full.ravel(), np.repeat(meas[inside] / (d + 1), d + 1))
    loc = meas[inside][:, None, None] * ref
    rows.append(np.repeat(full, d + 1, axis=1).ravel())
    cols.append(np.tile(full, (1, d + 1)).ravel())
    vals.append(loc.ravel())

    for c in np.flatnonzero(~inside & ~outside):
        nodes = mesh.cells[c]
        for sub in _clipped_simplices(P[c], region, d):
            ms = _simplex_measure(sub, d)
            if ms <= 0:
                continue
            Lam = _barycentric(P[c], sub)          # sub-vertex x parent hat
            np.add.at(part, nodes, ms * Lam.mean(axis=0))
            s = Lam.sum(axis=0)
            local = ms / ((d + 1) * (d + 2)) * (Lam.T @ Lam + np.outer(s, s))
            rows.append(np.repeat(nodes, d + 1))
            cols.append(np.tile(nodes, d + 1))
            vals.append(local.ravel())

    mass = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
    frac = np.clip(part / total, 0.0, 1.0)
    return InteriorWeights(frac, float(mesh.region_measure()), mass)


# ----------------------------------------------------------------------
# errors


def l2_error_empirical(truth, post, w: InteriorWeights) -> float:
    """Interior L2 norm of the piecewise-linear interpolant of ``truth - mean``.

    ``post`` is a posterior object with a ``mean`` attribute, or a vector.
    """
    mean = post if isinstance(post, np.ndarray) else getattr(post, "mean", post)
    e = np.asarray(truth, dtype=float) - np.asarray(mean, dtype=float)
    if e.shape != (w.n,):
        raise ShapeMismatch(f"error vector has shape {e.shape}, weights cover {w.n} nodes")
    return math.sqrt(max(float(e @ (w.mass @ e)), 0.0))


def _view(B, n_latent, n_out):
    if B is None:
        if n_latent == n_out:
            return sp.identity(n_out, format="csr")
        # latent vector (u, extra) with u leading
        return sp.hstack([sp.identity(n_out), sp.csr_matrix((n_out, n_latent - n_out))], format="csr")
    B = sp.csr_matrix(B)
    if B.shape != (n_out, n_latent):
        raise ShapeMismatch(f"view has shape {B.shape}, expected {(n_out, n_latent)}")
    return B


def l2_error_approx(factor, w: InteriorWeights, pushforward=None) -> float:
    """``sqrt(V / M * tr(I B Sigma B^T I))`` from a posterior precision factor.

    ``pushforward`` is the map ``B`` from the latent vector to the field of
    interest (for instance ``L~^{-1} K`` for the source); the identity on the
    leading block by default.
    """
    B = _view(pushforward, factor.n, w.n)
    IB = w.I_int @ B
    tr = selected_trace(factor, IB, IB.T)
    return math.sqrt(w.volume / w.M * max(tr, 0.0))


def local_convergence_slope(Q, AtA, w: InteriorWeights, zeta, m, sigma2, pushforward=None) -> float:
    """d log L2 / d zeta for the trace approximation at data density ``zeta``.

    ``-1/2 c tr(I B S A^T A S B^T I) / tr(I B S B^T I)`` with
    ``c = exp(zeta) / (m sigma2)`` and ``S = (Q + c A^T A)^{-1}``.
    """
    Q = sp.csc_matrix(Q)
    AtA = sp.csc_matrix(AtA)
    c = math.exp(zeta) / (m * sigma2)
    F = cholesky((Q + c * AtA).tocsc())
    B = _view(pushforward, F.n, w.n)
    IB = (w.I_int @ B).tocsr()
    keep = np.flatnonzero(np.diff(IB.indptr))      # rows with any weight
    IBk = IB[keep]
    Z = F.solve(IBk.T.toarray())                   # S B^T I, nonzero columns only
    num = float(np.sum(Z * (AtA @ Z)))
    den = float(np.sum(IBk.toarray().T * Z))
    if den <= 0:
        return 0.0
    return -0.5 * c * num / den


# ----------------------------------------------------------------------
# sample-size sweep


@dataclass
class ErrorCurve:
    """Empirical and approximate L2 errors over a sample-size grid."""

    sizes: np.ndarray
    empirical_u: np.ndarray
    empirical_f: np.ndarray
    approx_u: np.ndarray
    approx_f: np.ndarray
    slope_u: np.ndarray
    slope_f: np.ndarray
    replicates: int = 0

    def __post_init__(self):
        k = len(self.sizes)
        for name in ("empirical_u", "empirical_f", "approx_u", "approx_f", "slope_u", "slope_f"):
            if len(getattr(self, name)) != k:
                raise ShapeMismatch(f"{name} length differs from the size grid")

    def fitted_slope(self, which="u", window=(1e2, 1e4), approx=False):
        y = getattr(self, ("approx_" if approx else "empirical_") + which)
        return fit_loglog_slope(self.sizes, y, window)

    def rows(self):
        for i, N in enumerate(self.sizes):
            yield (int(N), self.empirical_u[i], self.approx_u[i], self.slope_u[i],
                   self.empirical_f[i], self.approx_f[i], self.slope_f[i])

    def to_csv(self, path):
        path = Path(path)
        with path.open("w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["N", "empirical_u", "approx_u", "slope_u", "empirical_f", "approx_f", "slope_f"])
            for r in self.rows():
                wr.writerow([r[0]] + [f"{x:.10g}" for x in r[1:]])


def fit_loglog_slope(sizes, values, window=(1e2, 1e4)):
    """Least-squares slope of log(values) on log(sizes) inside ``window``."""
    sizes = np.asarray(sizes, dtype=float)
    values = np.asarray(values, dtype=float)
    sel = (sizes >= window[0]) & (sizes <= window[1]) & (values > 0)
    if sel.sum() < 2:
        raise ValueError("need at least two sizes inside the fitting window")
    return float(np.polyfit(np.log(sizes[sel]), np.log(values[sel]), 1)[0])


@dataclass
class SweepCase:
    """Everything a sweep needs about one model.

    ``prior`` is the GMRF prior of the latent vector (the solution, possibly
    stacked with regression coefficients), ``to_u`` and ``to_f`` map the
    latent vector to nodal solution and source, ``locate`` maps sample
    positions to observation rows on the latent vector.
    """

    prior: object
    to_u: sp.csr_matrix
    to_f: sp.csr_matrix
    weights: InteriorWeights
    sigma2: float
    locate: object
    region: tuple

    @property
    def n_latent(self):
        return self.prior.n


def sample_locations(region, N):
    """``N`` evenly spaced points across a 1-D interior (cell midpoints)."""
    a, b = region
    return a + (np.arange(N) + 0.5) * (b - a) / N


def _sweep_one(case: SweepCase, N, replicates, seed):
    rng = np.random.default_rng([seed, int(N)])
    F0 = case.prior.factor
    A = sp.csr_matrix(case.locate(sample_locations(case.region, N)))
    W = (A.T / math.sqrt(case.sigma2)).tocsc()
    if W.shape[1] > F0.n:
        Fp = cholesky((case.prior.Q + W @ W.T).tocsc(), symbolic=F0.symbolic)
    else:
        Fp = lowrank_update(F0, W, "+")
    eu = np.empty(replicates)
    ef = np.empty(replicates)
    for k in range(replicates):
        x = F0.sample(rng)
        y = A @ x + math.sqrt(case.sigma2) * rng.standard_normal(A.shape[0])
        mean = Fp.solve(A.T @ y) / case.sigma2
        eu[k] = l2_error_empirical(case.to_u @ x, case.to_u @ mean, case.weights)
        ef[k] = l2_error_empirical(case.to_f @ x, case.to_f @ mean, case.weights)

    # approximation: the interior observed uniformly N / M times
    w = case.weights
    M = w.M
    I_lat = case.to_u.T @ w.I_int @ case.to_u
    Q = case.prior.Q
    Fa = cholesky((Q + (N / M) / case.sigma2 * I_lat).tocsc(), symbolic=F0.symbolic)
    au = l2_error_approx(Fa, w, case.to_u)
    af = l2_error_approx(Fa, w, case.to_f)
    zeta = math.log(N)
    su = local_convergence_slope(Q, I_lat, w, zeta, M, case.sigma2, case.to_u)
    sf = local_convergence_slope(Q, I_lat, w, zeta, M, case.sigma2, case.to_f)
    return float(eu.mean()), float(ef.mean()), au, af, su, sf


def _sweep_job(args):
    return _sweep_one(*args)


def convergence_sweep(case: SweepCase, sizes, replicates=30, seed=0, workers=1) -> ErrorCurve:
    """Mean empirical L2 over replicated datasets and the trace approximation.

    For each sample size ``N`` the samples are evenly spaced over the
    interior, ``replicates`` latent truths and data sets are drawn from the
    model, and the mean empirical error of the kriging mean is recorded.
    The approximation assumes ``A^T A = I_int`` observed ``N / M`` times.
    """
    sizes = np.asarray(sizes, dtype=int)
    if np.any(sizes <= 0) or np.any(np.diff(sizes) <= 0):
        raise ValueError("sample sizes must be positive and increasing")
    jobs = [(case, int(N), replicates, seed) for N in sizes]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            res = list(ex.map(_sweep_job, jobs))
    else:
        res = [_sweep_job(j) for j in jobs]
    cols = np.array(res).T
    return ErrorCurve(sizes, cols[0], cols[1], cols[2], cols[3], cols[4], cols[5], replicates)
