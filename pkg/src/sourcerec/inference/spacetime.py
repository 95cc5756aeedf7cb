"""Space-time kriging.

Two routes give the same Gaussian posterior:

* ``precision``: sparse factor of ``R^T Q_f R + A^T A / s2`` over the
  whole stacked space-time vector, with ``f = R u`` read off by sandwich
  variances.
* ``smoother``: Kalman filter and modified Bryson-Frazier smoother over
  the Markov state (source stages, solution), valid for sources carrying
  :class:`~sourcerec.gmrf.NestedDiffusionDynamics`.  It never forms the
  stacked precision, so it stays accurate when that precision is too
  ill-conditioned to factor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from ..errors import ShapeMismatch
from ..forward import ObservationSet, SpaceTimeOperator, spacetime_solution_prior
from .kriging import krige_solution, krige_source

# stacked dimension above which "auto" prefers the smoother
AUTO_SMOOTHER_SIZE = 20_000


@dataclass
class SpaceTimePosterior:
    """Pointwise posterior summaries on the ``(n_steps, n_space)`` grid."""

    u_mean: np.ndarray
    u_var: np.ndarray
    f_mean: np.ndarray
    f_var: np.ndarray
    method: str

    def grid(self, name):
        """One of ``u_mean, u_sd, f_mean, f_sd`` as a 2-D array."""
        if name.endswith("_sd"):
            return np.sqrt(np.maximum(getattr(self, name[:-3] + "_var"), 0.0))
        return getattr(self, name)


def krige_spacetime(op: SpaceTimeOperator, f_prior, obs: ObservationSet, method="auto",
                    checkpoint=None) -> SpaceTimePosterior:
    """Posterior means and variances of ``u`` and ``f`` on every node and step.

    Parameters
    ----------
    op : SpaceTimeOperator
    f_prior : GmrfPrior
        Stacked source prior.  The smoother needs its ``dynamics``.
    obs : ObservationSet
        Rows of ``A`` may touch one step or two consecutive steps.
    method : {"auto", "precision", "smoother"}
    checkpoint : int, optional
        Smoother checkpoint spacing (defaults to about ``sqrt(n_steps)``).
    """
    if f_prior.n != op.n or obs.A.shape[1] != op.n:
        raise ShapeMismatch("source prior, operator and observations must share the stacked dimension")
    dyn = getattr(f_prior, "dynamics", None)
    if method == "auto":
        method = "smoother" if dyn is not None and op.n > AUTO_SMOOTHER_SIZE else "precision"
    if method == "precision":
        return _precision_route(op, f_prior, obs)
    if method != "smoother":
        raise ValueError(f"unknown method {method!r}")
    if dyn is None:
        raise ValueError("the smoother needs a source prior with Markov dynamics")
    if dyn.n_steps != op.n_steps:
        raise ShapeMismatch("source and operator have different step counts")
    return _smoother_route(op, f_prior, dyn, obs, checkpoint)


def _precision_route(op, f_prior, obs):
    post_u = krige_solution(spacetime_solution_prior(op, f_prior), obs)
    post_f = krige_source(op, post_u)
    shape = (op.n_steps, op.n_space)
    return SpaceTimePosterior(post_u.mean.reshape(shape), post_u.marginal_variances().reshape(shape),
                              post_f.mean.reshape(shape), post_f.marginal_variances().reshape(shape),
                              "precision")


class _Transitions:
    """Dense transition ``z_k = T_k z_{k-1} + G_k e_k`` of ``z = (stages, u)``."""

    def __init__(self, op, dyn):
        self.op = op
        Ts, Es, self.W = dyn.matrices()
        self.Ts, self.Es = Ts, Es
        self.nsrc = Ts.shape[0]
        self.ns = op.n_space
        self.nz = self.nsrc + self.ns
        self._cache = {}

    def f_slice(self):
        return slice(self.nsrc - self.ns, self.nsrc)

    def u_slice(self):
        return slice(self.nsrc, self.nz)

    def at(self, k):
        """``(T, G W G^T, M_k^{-1})`` for step ``k`` (0-based)."""
        key = id(self.op.system(k))
        if key not in self._cache:
            op, ns, nsrc = self.op, self.ns, self.nsrc
            Minv = op.step_inverse(k).toarray()
            P = np.linalg.solve(Minv, np.eye(ns))         # (L~ + dt K)^{-1} L~
            T = np.zeros((self.nz, self.nz))
            T[:nsrc, :nsrc] = self.Ts
            T[nsrc:, :nsrc] = op.dt * P @ self.Ts[nsrc - ns:]
            T[nsrc:, nsrc:] = P
            G = np.vstack([self.Es, op.dt * P @ self.Es[nsrc - ns:]])
            Qn = G @ self.W @ G.T
            self._cache[key] = (T, 0.5 * (Qn + Qn.T), Minv)
        return self._cache[key]


def _observation_rows(obs, trans, op):
    """Group rows of ``A`` by the latest step they touch and express each
    as a row on the state ``z`` at that step."""
    A = obs.A.tocsr()
    ns = op.n_space
    groups = {}
    fs, us = trans.f_slice(), trans.u_slice()
    for i in range(A.shape[0]):
        cols = A.indices[A.indptr[i]:A.indptr[i + 1]]
        vals = A.data[A.indptr[i]:A.indptr[i + 1]]
        if cols.size == 0:
            continue
        steps = cols // ns
        k = int(steps.max())
        if np.any(steps < k - 1):
            raise ShapeMismatch("an observation row spans more than two consecutive steps")
        h = np.zeros(trans.nz)
        hi = steps == k
        h[us.start + cols[hi] % ns] += vals[hi]
        lo = ~hi
        if np.any(lo):
            # u_{k-1} = M_k^{-1} u_k - dt f_k
            a = np.zeros(ns)
            np.add.at(a, cols[lo] % ns, vals[lo])
            _, _, Minv = trans.at(k)
            h[us] += a @ Minv
            h[fs] -= op.dt * a
        groups.setdefault(k, []).append((i, h))
    out = {}
    for k, rows in groups.items():
        idx = np.array([r[0] for r in rows])
        out[k] = (idx, np.array([r[1] for r in rows]))
    return out


def _update(Pp, H, sigma2):
    PHt = Pp @ H.T
    S = H @ PHt + sigma2 * np.eye(H.shape[0])
    cf = sla.cho_factor(S)
    K = sla.cho_solve(cf, PHt.T).T
    return K, cf


def _smoother_route(op, f_prior, dyn, obs, checkpoint):
    if not obs.sigma2 > 0 and obs.m:
        raise ValueError("the smoother needs a positive noise variance")
    trans = _Transitions(op, dyn)
    nz, ns, N = trans.nz, op.n_space, op.n_steps
    fs, us = trans.f_slice(), trans.u_slice()
    mu_f = np.asarray(f_prior.mean, dtype=float)
    mu_u = op.integrate(mu_f) if np.any(mu_f) else np.zeros(op.n)
    y = obs.y - obs.A @ mu_u
    rows = _observation_rows(obs, trans, op)
    C = checkpoint or max(1, int(np.sqrt(N)))

    # forward filter: predicted means every step, filtered covariances at checkpoints
    m_pred = np.empty((N, nz))
    innov = {}
    checkpoints = {}
    m = np.zeros(nz)
    P = np.zeros((nz, nz))
    for k in range(N):
        if k % C == 0:
            checkpoints[k] = P
        T, Qn, _ = trans.at(k)
        m = T @ m
        P = T @ P @ T.T + Qn
        m_pred[k] = m
        if k in rows:
            idx, H = rows[k]
            K, _ = _update(P, H, obs.sigma2)
            d = y[idx] - H @ m
            innov[k] = d
            m = m + K @ d
            P = P - K @ (H @ P)
            P = 0.5 * (P + P.T)

    # backward pass over segments, replaying each segment's covariances
    u_mean = np.empty((N, ns))
    f_mean = np.empty((N, ns))
    u_var = np.empty((N, ns))
    f_var = np.empty((N, ns))
    Lam = np.zeros((nz, nz))
    lam = np.zeros(nz)
    active = False
    for start in sorted(checkpoints, reverse=True):
        stop = min(start + C, N)
        P = checkpoints[start]
        seg = []
        for k in range(start, stop):
            T, Qn, _ = trans.at(k)
            P = T @ P @ T.T + Qn
            gain = None
            if k in rows:
                idx, H = rows[k]
                gain = _update(P, H, obs.sigma2)
                seg.append((P, gain))
                K, _ = gain
                P = P - K @ (H @ P)
                P = 0.5 * (P + P.T)
            else:
                seg.append((P, None))
        for k in range(stop - 1, start - 1, -1):
            Pp, gain = seg[k - start]
            if gain is not None:
                _, H = rows[k]
                K, cf = gain
                Ct = np.eye(nz) - K @ H
                SiH = sla.cho_solve(cf, H)
                Lam = H.T @ SiH + Ct.T @ Lam @ Ct
                lam = -SiH.T @ innov[k] + Ct.T @ lam
                active = True
            mk = m_pred[k] - Pp @ lam if active else m_pred[k]
            u_mean[k] = mk[us]
            f_mean[k] = mk[fs]
            dP = np.diagonal(Pp)
            if active:
                sub = np.r_[np.arange(fs.start, fs.stop), np.arange(us.start, us.stop)]
                X = Pp[sub] @ Lam
                corr = np.einsum("ij,ij->i", X, Pp[sub])
                f_var[k] = dP[fs] - corr[:ns]
                u_var[k] = dP[us] - corr[ns:]
            else:
                f_var[k] = dP[fs]
                u_var[k] = dP[us]
            if active:
                T, _, _ = trans.at(k)
                Lam = T.T @ Lam @ T
                lam = T.T @ lam
    shape = (N, ns)
    return SpaceTimePosterior(u_mean + mu_u.reshape(shape), u_var, f_mean + mu_f.reshape(shape), f_var,
                              "smoother")
