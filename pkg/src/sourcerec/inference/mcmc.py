"""Metropolis-within-Gibbs sampling of PDE and prior hyperparameters.

Parameters ``rho, D, r, v`` (and ``v_beta`` with covariates) move by
Gaussian random walks on the log scale; the source variance ``sigma2_f``
has an inverse-gamma full conditional.  The latent fields are integrated
out, and posterior summaries of ``u``, ``f`` and ``beta`` are produced
afterwards as generated quantities.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial

import numpy as np
import scipy.sparse as sp
from scipy import stats

from ..errors import ConfigInvalid, NotPositiveDefinite
from ..fem import FemSystem
from ..gmrf import GmrfPrior, MaternHyper, RegressionDesign, matern_precision, regression_joint_precision
from ..sparse import CholeskyFactor, FactorPlan, lowrank_update, stabilized_quadform
from .kriging import PosteriorGaussian

MH_PARAMS = ("rho", "D", "r", "v", "v_beta")


# ----------------------------------------------------------------------
# priors

@dataclass(frozen=True)
class Gamma:
    """Gamma prior with ``shape`` and ``rate``."""

    shape: float
    rate: float
    fixed = False

    def logpdf(self, x):
        if x <= 0:
            return -math.inf
        return float(stats.gamma.logpdf(x, self.shape, scale=1.0 / self.rate))

    def sample(self, rng):
        return rng.gamma(self.shape, 1.0 / self.rate)

    def interval(self, q=0.95):
        return tuple(stats.gamma.interval(q, self.shape, scale=1.0 / self.rate))


@dataclass(frozen=True)
class InvGamma:
    """Inverse-gamma prior with ``shape`` and ``scale``."""

    shape: float
    scale: float
    fixed = False

    def logpdf(self, x):
        if x <= 0:
            return -math.inf
        return float(stats.invgamma.logpdf(x, self.shape, scale=self.scale))

    def sample(self, rng):
        return self.scale / rng.gamma(self.shape)

    def interval(self, q=0.95):
        return tuple(stats.invgamma.interval(q, self.shape, scale=self.scale))


@dataclass(frozen=True)
class PointMass:
    """Degenerate prior: the parameter is held at ``value``."""

    value: float
    fixed = True

    def logpdf(self, x):
        return 0.0 if x == self.value else -math.inf

    def sample(self, rng):
        return self.value

    def interval(self, q=0.95):
        return (self.value, self.value)


# ----------------------------------------------------------------------
# model

class _LinearPattern:
    """Sparse matrices on one shared pattern, combined by weights in numpy."""

    def __init__(self, terms):
        union = None
        for T in terms:
            P = abs(sp.csc_matrix(T))
            union = P if union is None else union + P
        union = sp.csc_matrix(union)
        union.sum_duplicates()
        union.sort_indices()
        self.indptr, self.indices, self.shape = union.indptr, union.indices, union.shape
        cols = np.repeat(np.arange(self.shape[1]), np.diff(self.indptr))
        key = cols.astype(np.int64) * self.shape[0] + self.indices
        self.data = np.zeros((len(terms), key.shape[0]))
        for t, T in enumerate(terms):
            c = sp.coo_matrix(T)
            pos = np.searchsorted(key, c.col.astype(np.int64) * self.shape[0] + c.row)
            np.add.at(self.data[t], pos, c.data)

    def combine(self, weights):
        d = np.asarray(weights, dtype=float) @ self.data
        return sp.csc_matrix((d, self.indices, self.indptr), shape=self.shape)


class SteadyModel:
    """Steady advection-diffusion-reaction model with a Matérn source.

    Holds the coefficient-free FEM pieces so that the solution precision for
    any ``(rho, D, r, v_beta)`` is assembled cheaply.  All precisions are
    built for unit source variance; the true precision is that divided by
    ``sigma2_f``.

    For ``alpha = 2`` the solution precision is ``tau^2 M^T M`` with
    ``M = C^{-1/2} (kappa^2 C + G) C^{-1} K`` and ``K = A + D G + r L``.
    ``M`` is linear in ``w = (kappa^2, kappa^2 D, kappa^2 r, 1, D, r)``, so
    the precision (and the coefficient blocks, through
    ``N = C^{-1/2} (kappa^2 C + G)``) is a fixed combination of
    precomputed matrices with weights quadratic in ``w``.
    """

    def __init__(self, sys: FemSystem, alpha=2, design: RegressionDesign | None = None):
        self.sys = sys
        self.alpha = alpha
        self.design = design if (design is not None and design.p > 0) else None
        self._perm = None
        self._basis = None
        self._plan = None
        self._A_cache = None
        if alpha == 2:
            self._basis = self._build_basis()

    def _build_basis(self):
        sys = self.sys
        n = sys.n
        p = self.design.p if self.has_beta else 0
        lumped = sys.lumped
        Ch = sp.diags(np.sqrt(lumped))
        Cmh = sp.diags(1.0 / np.sqrt(lumped))
        Ci = sp.diags(1.0 / lumped)
        G, Adv, L = sys.parts["diff"], sys.parts["adv"], sys.L
        P2 = Cmh @ G @ Ci
        Ms = [sp.csc_matrix(T) for T in (Cmh @ Adv, Cmh @ G, Cmh @ L, P2 @ Adv, P2 @ G, P2 @ L)]
        size = n + p

        def embed(T, r0, c0):
            T = sp.coo_matrix(T)
            return sp.csc_matrix((T.data, (T.row + r0, T.col + c0)), shape=(size, size))

        terms, index = [], []
        for i in range(6):
            for j in range(i, 6):
                T = Ms[i].T @ Ms[j]
                terms.append(embed(T + T.T if i != j else T, 0, 0))
                index.append(("uu", i, j))
        if p:
            X = self.design.X
            NX = [np.asarray(Ch @ X), np.asarray(Cmh @ G @ X)]
            for i in range(6):
                for k in range(2):
                    T = -(Ms[i].T @ NX[k])
                    terms.append(embed(T, 0, n) + embed(T.T, n, 0))
                    index.append(("ub", i, k))
            for k in range(2):
                for l in range(k, 2):
                    T = NX[k].T @ NX[l]
                    terms.append(embed(T + T.T if k != l else T, n, n))
                    index.append(("bb", k, l))
            terms.append(embed(self.design.Q_beta, n, n))
            index.append(("beta", 0, 0))
        self._index = index
        return _LinearPattern(terms)

    @property
    def has_beta(self):
        return self.design is not None

    @property
    def n_latent(self):
        return self.sys.n + (self.design.p if self.has_beta else 0)

    def _generic_unit_prior(self, theta, sysk):
        fprior = matern_precision(sysk, MaternHyper(theta["rho"], 1.0, self.alpha))
        if self.has_beta:
            design = RegressionDesign(self.design.X, self.design.Q_beta, theta["v_beta"])
            return regression_joint_precision(sysk, fprior, design, 1.0)
        B = sysk.pushforward()
        Q = (B.T @ fprior.Q @ B).tocsc()
        return GmrfPrior(((Q + Q.T) * 0.5).tocsc())

    def _fast_unit_prior(self, theta):
        d = self.sys.mesh.dim
        hyper = MaternHyper(theta["rho"], 1.0, 2)
        k2, tau2 = hyper.kappa(d) ** 2, hyper.tau2(d)
        D, r = theta["D"], theta["r"]
        w = (k2, k2 * D, k2 * r, 1.0, D, r)
        nw = (k2, 1.0)
        coef = []
        for kind, i, j in self._index:
            if kind == "uu":
                coef.append(tau2 * w[i] * w[j])
            elif kind == "ub":
                coef.append(tau2 * w[i] * nw[j])
            elif kind == "bb":
                coef.append(tau2 * nw[i] * nw[j])
            else:
                coef.append(1.0 / theta["v_beta"])
        return GmrfPrior(self._basis.combine(coef))

    def unit_prior(self, theta):
        """Latent prior (solution, or solution plus coefficients) at sigma2_f = 1.

        Returns the prior and the system at ``theta``'s coefficients (the
        latter built lazily on the fast path, as a zero-argument callable).
        """
        if self._basis is not None:
            prior = self._fast_unit_prior(theta)
            sysk = partial(self.sys.with_coefficients, theta["D"], theta["r"])
            if self._plan is None:
                self._plan = FactorPlan(prior.Q)
                self._perm = self._plan.perm
            prior.ordering = self._perm
            return prior.with_factor(self._plan.factor(prior.Q.data)), sysk
        else:
            sysk = self.sys.with_coefficients(theta["D"], theta["r"])
            prior = self._generic_unit_prior(theta, sysk)
        if self._perm is None:
            self._perm = prior.factor.perm
        else:
            prior.ordering = self._perm
        return prior, sysk

    def extended_A(self, obs):
        key = id(obs.A)
        if self._A_cache is not None and self._A_cache[0] == key:
            return self._A_cache[1]
        A = obs.A
        if self.has_beta and A.shape[1] == self.sys.n:
            A = sp.hstack([A, sp.csr_matrix((A.shape[0], self.design.p))], format="csr")
        A = sp.csr_matrix(A)
        self._A_cache = (key, A, A.T.tocsc())
        return A

    def evaluate(self, theta, obs):
        """Quantities that do not depend on sigma2_f.

        Returns a dict with ``ld`` = logdet(Q~ + A^T A / v) - logdet(Q~) and
        ``q`` = y^T (A Q~^{-1} A^T + v I)^{-1} y, plus the factors.
        """
        prior, sysk = self.unit_prior(theta)
        A = self.extended_A(obs)
        v = theta["v"]
        F = prior.factor
        if A.shape[0]:
            At = self._A_cache[2]
            W = sp.csc_matrix((At.data / np.sqrt(v), At.indices, At.indptr), shape=At.shape)
            Fp = lowrank_update(F, W, "+")
            q = stabilized_quadform(prior.Q, A, v, obs.y, inner=Fp)
        else:
            Fp, q = F, 0.0
        return {"ld": Fp.logdet() - F.logdet(), "q": q, "prior": prior, "F": F, "Fp": Fp,
                "A": A, "sys": sysk, "m": A.shape[0], "n": prior.n}

    @staticmethod
    def loglik_from(ev, sigma2_f, v):
        m = ev["m"]
        if m == 0:
            return 0.0
        return -0.5 * (m * math.log(2 * math.pi * v * sigma2_f) + ev["ld"] + ev["q"] / sigma2_f)

    def loglik(self, theta, obs):
        return self.loglik_from(self.evaluate(theta, obs), theta["sigma2_f"], theta["v"])

    def generated(self, theta, obs, ev=None, rng=None):
        """Posterior means and variances of u, f (and beta) at ``theta``."""
        ev = self.evaluate(theta, obs) if ev is None else ev
        if callable(ev["sys"]):
            ev["sys"] = ev["sys"]()
        s2, v = theta["sigma2_f"], theta["v"]
        # posterior precision is (Q~ + A^T A / v) / s2: rescale the cached factor
        Fp = ev["Fp"]
        F = CholeskyFactor(Fp.perm, Fp.Lp, Fp.Li, Fp.Lx / math.sqrt(s2), Fp.parent)
        mean = Fp.solve(ev["A"].T @ obs.y) / v if ev["m"] else np.zeros(ev["n"])
        post = PosteriorGaussian(mean, F)
        n = self.sys.n
        diag = F.marginal_variances()
        B = ev["sys"].pushforward()
        if self.has_beta:
            B = sp.hstack([B, sp.csr_matrix((n, self.design.p))], format="csr")
        out = {"u": (mean[:n], diag[:n]), "f": (B @ mean, F.sandwich_variances(B))}
        if self.has_beta:
            out["beta"] = (mean[n:], diag[n:])
        if rng is not None:
            x = post.sample(rng)
            out["draw_u"] = x[: self.sys.n]
            out["draw_f"] = ev["sys"].pushforward() @ x[: self.sys.n]
        return out


# ----------------------------------------------------------------------
# configuration and results

DEFAULT_STEPS = {"rho": 0.15, "D": 0.15, "r": 0.2, "v": 0.3, "v_beta": 0.5}


@dataclass
class McmcConfig:
    """Sampler settings.

    ``n_iter`` counts post-burn-in iterations; every ``thin``-th of them is
    retained, so each chain keeps ``n_iter // thin`` samples.
    """

    priors: dict
    n_chains: int = 4
    n_iter: int = 5000
    burn_in: int = 5000
    thin: int = 5
    steps: dict = field(default_factory=lambda: dict(DEFAULT_STEPS))
    seed: int = 0
    adapt: bool = True
    adapt_window: int = 50
    target_accept: tuple = (0.30, 0.45)
    sigma2_update: str = "collapsed"
    generate: bool = True
    keep_draws: int = 0
    workers: int = 1
    init: dict | None = None

    def validate(self, model):
        need = ["rho", "D", "r", "v", "sigma2_f"] + (["v_beta"] if model.has_beta else [])
        for k in need:
            if k not in self.priors:
                raise ConfigInvalid("missing prior", field=f"prior.{k}")
        if not isinstance(self.priors["sigma2_f"], (InvGamma, PointMass)):
            raise ConfigInvalid("sigma2_f needs an inverse-gamma or point-mass prior", field="prior.sigma2_f")
        if self.n_iter < 1 or self.burn_in < 0:
            raise ConfigInvalid("need n_iter >= 1 and burn_in >= 0", field="mcmc.iterations")
        if self.thin < 1:
            raise ConfigInvalid("thinning must be at least 1", field="mcmc.thin")
        if self.n_chains < 1:
            raise ConfigInvalid("need at least one chain", field="mcmc.chains")
        if self.sigma2_update not in ("collapsed", "augmented"):
            raise ConfigInvalid("sigma2_update must be collapsed or augmented", field="mcmc.sigma2_update")
        return need


@dataclass
class ChainResult:
    samples: dict
    loglik: np.ndarray
    accepted: dict
    acceptance: dict
    steps: dict
    summaries: dict = field(default_factory=dict)
    draws: list = field(default_factory=list)
    iterations: np.ndarray = None
    failed: int = 0


@dataclass
class McmcResult:
    chains: list
    summaries: dict

    @property
    def params(self):
        return list(self.chains[0].samples)

    def pooled(self, name):
        return np.concatenate([c.samples[name] for c in self.chains])


# ----------------------------------------------------------------------
# target and kernels

def log_prior(theta, priors, names):
    total = 0.0
    for k in names:
        pr = priors[k]
        if pr.fixed:
            continue
        lp = pr.logpdf(theta[k])
        if lp == -math.inf:
            return -math.inf
        # log-scale random walk: include the Jacobian of x = exp(z)
        total += lp + math.log(theta[k])
    return total


def log_target(model, obs, theta, priors, names, ev=None):
    lp = log_prior(theta, priors, names)
    if lp == -math.inf:
        return -math.inf, ev
    ev = model.evaluate(theta, obs) if ev is None else ev
    return model.loglik_from(ev, theta["sigma2_f"], theta["v"]) + lp, ev


def log_accept_ratio(model, obs, cfg, state, proposal):
    """log of the Metropolis acceptance ratio for a move ``state -> proposal``.

    The random walk is symmetric in log-parameters, so the ratio is the
    difference of log targets on the log scale.
    """
    names = [k for k in cfg.priors if k in state]
    a, _ = log_target(model, obs, proposal, cfg.priors, names)
    b, _ = log_target(model, obs, state, cfg.priors, names)
    return a - b


def sigma2_conditional(ev, prior, v, y, u=None):
    """Shape and scale of the inverse-gamma full conditional of sigma2_f.

    Collapsed (``u is None``): ``IG(a + m/2, b + q/2)`` with ``q`` the
    marginal quadratic form.  Augmented: conditional on a latent draw ``u``,
    ``IG(a + (n + m)/2, b + (u^T Q~ u + |y - A u|^2 / v)/2)``.
    """
    if u is None:
        return prior.shape + ev["m"] / 2.0, prior.scale + ev["q"] / 2.0
    Qt = ev["prior"].Q
    quad = float(u @ (Qt @ u))
    r = y - ev["A"] @ u
    return (prior.shape + (ev["n"] + ev["m"]) / 2.0,
            prior.scale + 0.5 * (quad + float(r @ r) / v))


def draw_latent(ev, obs, theta, rng):
    """Draw the latent vector from its conditional given y and all parameters."""
    Fp, A, v, s2 = ev["Fp"], ev["A"], theta["v"], theta["sigma2_f"]
    mean = Fp.solve(A.T @ obs.y) / v if ev["m"] else np.zeros(ev["n"])
    return mean + math.sqrt(s2) * Fp.sample(rng)


def _initial_state(cfg, names, rng):
    theta = {}
    for k in names:
        pr = cfg.priors[k]
        if cfg.init and k in cfg.init:
            theta[k] = float(cfg.init[k])
        elif pr.fixed:
            theta[k] = pr.value
        else:
            lo, hi = pr.interval(0.5)
            theta[k] = float(np.sqrt(lo * hi))
    return theta


class _Moments:
    """Running mixture moments: mean of means, second moment of means, mean variance."""

    def __init__(self):
        self.n = 0
        self.s1 = None
        self.s2 = None
        self.sv = None

    def add(self, mean, var):
        if self.s1 is None:
            self.s1 = np.zeros_like(mean)
            self.s2 = np.zeros_like(mean)
            self.sv = np.zeros_like(var)
        self.n += 1
        self.s1 += mean
        self.s2 += mean * mean
        self.sv += var

    def merge(self, other):
        if other.n == 0:
            return
        if self.n == 0:
            self.n, self.s1, self.s2, self.sv = other.n, other.s1.copy(), other.s2.copy(), other.sv.copy()
            return
        self.n += other.n
        self.s1 += other.s1
        self.s2 += other.s2
        self.sv += other.sv

    def result(self):
        m = self.s1 / self.n
        var = self.sv / self.n + np.maximum(self.s2 / self.n - m * m, 0.0)
        return m, np.sqrt(var)


def run_chain(model, obs, cfg, chain_id=0):
    """Run one chain; see :func:`run_mcmc`."""
    names = cfg.validate(model)
    rng = np.random.default_rng([cfg.seed, chain_id])
    moving = [k for k in names if k != "sigma2_f" and not cfg.priors[k].fixed]
    steps = {k: float(cfg.steps.get(k, DEFAULT_STEPS.get(k, 0.2))) for k in moving}
    theta = _initial_state(cfg, names, rng)
    cur, ev = log_target(model, obs, theta, cfg.priors, names)
    if cur == -math.inf:
        raise ConfigInvalid("initial state has zero prior density", field="mcmc.init")

    total = cfg.burn_in + cfg.n_iter
    n_keep = cfg.n_iter // cfg.thin
    samples = {k: np.empty(n_keep) for k in names}
    loglik = np.empty(n_keep)
    accepted = {k: np.zeros(n_keep, dtype=bool) for k in moving}
    acc_count = {k: 0 for k in moving}
    win_count = {k: 0 for k in moving}
    moments = {}
    draws = []
    keep = 0
    n_failed = 0
    iterations = np.empty(n_keep, dtype=np.int64)
    sig_prior = cfg.priors["sigma2_f"]

    for it in range(total):
        flags = {}
        for k in moving:
            prop = dict(theta)
            prop[k] = theta[k] * math.exp(steps[k] * rng.standard_normal())
            try:
                new, ev_new = log_target(model, obs, prop, cfg.priors, names)
            except NotPositiveDefinite:
                # numerically indefinite precision at an extreme proposal: reject
                new, ev_new = -math.inf, None
                n_failed += 1
            ok = math.log(rng.uniform()) < new - cur
            if ok:
                theta, cur, ev = prop, new, ev_new
                win_count[k] += 1
                if it >= cfg.burn_in:
                    acc_count[k] += 1
            flags[k] = ok
        if not sig_prior.fixed:
            u = draw_latent(ev, obs, theta, rng) if cfg.sigma2_update == "augmented" else None
            a, b = sigma2_conditional(ev, sig_prior, theta["v"], obs.y, u)
            theta = dict(theta)
            theta["sigma2_f"] = b / rng.gamma(a)
            cur, _ = log_target(model, obs, theta, cfg.priors, names, ev)

        if it < cfg.burn_in and cfg.adapt and (it + 1) % cfg.adapt_window == 0:
            lo, hi = cfg.target_accept
            for k in moving:
                rate = win_count[k] / cfg.adapt_window
                if rate < lo:
                    steps[k] *= 0.75
                elif rate > hi:
                    steps[k] *= 1.3
                win_count[k] = 0
        if it >= cfg.burn_in and (it - cfg.burn_in + 1) % cfg.thin == 0 and keep < n_keep:
            iterations[keep] = it - cfg.burn_in + 1
            for k in names:
                samples[k][keep] = theta[k]
            loglik[keep] = model.loglik_from(ev, theta["sigma2_f"], theta["v"])
            for k in moving:
                accepted[k][keep] = flags[k]
            if cfg.generate:
                want_draw = len(draws) < cfg.keep_draws
                g = model.generated(theta, obs, ev, rng if want_draw else None)
                for key, val in g.items():
                    if key.startswith("draw_"):
                        continue
                    moments.setdefault(key, _Moments()).add(*val)
                if want_draw:
                    draws.append({"u": g["draw_u"], "f": g["draw_f"], "u_mean": g["u"][0], "f_mean": g["f"][0]})
            keep += 1

    acceptance = {k: acc_count[k] / max(cfg.n_iter, 1) for k in moving}
    return ChainResult(samples, loglik, accepted, acceptance, steps, moments, draws, iterations, n_failed)


def _chain_job(args):
    return run_chain(*args)


def run_mcmc(model, obs, cfg):
    """Run ``cfg.n_chains`` independent chains and pool their summaries.

    Returns
    -------
    McmcResult
        ``chains`` with retained hyperparameter samples, and ``summaries``
        mapping ``"u"``, ``"f"`` (and ``"beta"``) to ``(mean, sd)`` arrays
        pooled over all retained samples (law of total variance).
    """
    cfg.validate(model)
    jobs = [(model, obs, cfg, c) for c in range(cfg.n_chains)]
    if cfg.workers > 1 and cfg.n_chains > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as ex:
            chains = list(ex.map(_chain_job, jobs))
    else:
        chains = [_chain_job(j) for j in jobs]
    pooled = {}
    for c in chains:
        for key, mom in c.summaries.items():
            pooled.setdefault(key, _Moments()).merge(mom)
    summaries = {k: m.result() for k, m in pooled.items() if m.n}
    return McmcResult(chains, summaries)
