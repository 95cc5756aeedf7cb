"""Gaussian conditioning of sparse priors on linear observations."""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from ..errors import ShapeMismatch
from ..forward import ObservationSet
from ..gmrf import GmrfPrior
from ..sparse import cholesky, lowrank_update, stabilized_quadform


class PosteriorGaussian:
    """Posterior of a latent vector ``x`` with precision factor ``factor``,
    optionally viewed through a linear map ``B`` (``z = B x + shift``).

    ``mean`` is the mean of the viewed quantity; ``latent_mean`` is the mean
    of ``x`` itself.
    """

    def __init__(self, latent_mean, factor, B=None, prior=None, obs=None, shift=None):
        self.latent_mean = np.asarray(latent_mean, dtype=float)
        self.factor = factor
        self.B = None if B is None else sp.csr_matrix(B)
        self.prior = prior
        self.obs = obs
        self.shift = shift

    @property
    def n(self):
        return self.latent_mean.shape[0] if self.B is None else self.B.shape[0]

    @property
    def mean(self):
        m = self.latent_mean if self.B is None else self.B @ self.latent_mean
        return m if self.shift is None else m + self.shift

    def marginal_variances(self):
        if self.B is None:
            return self.factor.marginal_variances()
        return self.factor.sandwich_variances(self.B)

    def sd(self):
        return np.sqrt(np.maximum(self.marginal_variances(), 0.0))

    def sample(self, rng, size=None):
        z = self.factor.sample(rng, size)
        x = z + (self.latent_mean if size is None else self.latent_mean[:, None])
        if self.B is not None:
            x = self.B @ x
        if self.shift is not None:
            x = x + (self.shift if size is None else self.shift[:, None])
        return x

    def view(self, B, shift=None):
        """Same posterior seen through another linear map of the latent vector."""
        return PosteriorGaussian(self.latent_mean, self.factor, B, self.prior, self.obs, shift)


def _check(prior, obs):
    if obs.A.shape[1] != prior.n:
        raise ShapeMismatch(f"A has {obs.A.shape[1]} columns, prior has dimension {prior.n}")


def posterior_factor(prior, obs):
    """Factor of ``Q + A^T A / sigma2`` by a low-rank update of the prior factor."""
    F = prior.factor
    if obs.m == 0:
        return F
    if not obs.sigma2 > 0:
        raise ValueError("kriging needs a positive noise variance")
    W = (obs.A.T / np.sqrt(obs.sigma2)).tocsc()
    if obs.m > F.n:
        # many rows: refactoring Q + W W^T beats m rank-one updates
        return cholesky((prior.Q + W @ W.T).tocsc(), symbolic=F.symbolic)
    return lowrank_update(F, W, "+")


def krige_solution(prior_u, obs, factor=None):
    """Posterior of the latent field given ``y = A u + eps``.

    The mean is ``mu + (Q + A^T A/s2)^{-1} A^T (y - A mu) / s2``.
    """
    _check(prior_u, obs)
    if obs.m == 0:
        return PosteriorGaussian(prior_u.mean.copy(), prior_u.factor, prior=prior_u, obs=obs)
    Fp = posterior_factor(prior_u, obs) if factor is None else factor
    resid = obs.y - obs.A @ prior_u.mean
    mean = prior_u.mean + Fp.solve(obs.A.T @ resid) / obs.sigma2
    return PosteriorGaussian(mean, Fp, prior=prior_u, obs=obs)


def krige_source(sys_or_op, post_u):
    """Posterior of the source: the pushforward of ``u | y`` through the
    inverse dynamics (``L~^{-1} K`` steady, ``R`` space-time)."""
    B = sys_or_op.R if hasattr(sys_or_op, "R") else sys_or_op.pushforward()
    if B.shape[1] != post_u.latent_mean.shape[0]:
        raise ShapeMismatch("posterior and system dimensions differ")
    shift = None
    if hasattr(sys_or_op, "rhs_offset"):
        # condensed system: K u2 = L~ (f2 + g); remove the boundary share
        shift = -sys_or_op.rhs_offset / sys_or_op.lumped
    return post_u.view(B, shift)


def krige_joint_regression(joint_prior, obs, sys, design):
    """Condition the stacked ``(u, beta)`` prior on observations of ``u``.

    Returns a dict with posteriors for ``u``, ``beta``, ``f = L~^{-1} K u``
    and ``eta = f - X beta``, all sharing one factor.
    """
    n, p = sys.n, design.p
    if joint_prior.n != n + p:
        raise ShapeMismatch("joint prior dimension must be nodes + covariates")
    A = obs.A
    if A.shape[1] == n:
        A = sp.hstack([A, sp.csr_matrix((A.shape[0], p))], format="csr")
    ext = ObservationSet(A, obs.y, obs.sigma2)
    post = krige_solution(joint_prior, ext)
    B = sys.pushforward()
    Z = sp.csr_matrix((n, p))
    to_u = sp.hstack([sp.identity(n), Z], format="csr")
    to_f = sp.hstack([B, Z], format="csr")
    to_beta = sp.hstack([sp.csr_matrix((p, n)), sp.identity(p)], format="csr")
    to_eta = sp.hstack([B, -sp.csr_matrix(design.X)], format="csr")
    return {
        "joint": post,
        "u": post.view(to_u),
        "f": post.view(to_f),
        "beta": post.view(to_beta),
        "eta": post.view(to_eta),
    }


def log_marginal_likelihood(prior_u, obs, post_factor=None):
    """log N(y; A mu, A Q^{-1} A^T + s2 I) via the two sparse factors.

    ``-1/2 [m log(2 pi s2) + logdet(Q_post) - logdet(Q) + q]`` where the
    quadratic ``q`` comes from :func:`stabilized_quadform`.
    """
    _check(prior_u, obs)
    m = obs.m
    if m == 0:
        return 0.0
    Fp = posterior_factor(prior_u, obs) if post_factor is None else post_factor
    d = obs.y - obs.A @ prior_u.mean
    q = stabilized_quadform(prior_u.Q, obs.A, obs.sigma2, d, inner=Fp)
    return -0.5 * (m * np.log(2 * np.pi * obs.sigma2) + Fp.logdet() - prior_u.factor.logdet() + q)


def condition_prior(prior, obs):
    """Convenience: kriging returning a new :class:`GmrfPrior` on the latent."""
    post = krige_solution(prior, obs)
    Qp = prior.Q + (obs.A.T @ obs.A) / obs.sigma2
    return GmrfPrior(Qp, post.latent_mean, prior.ordering).with_factor(post.factor)
