"""Kriging, marginal likelihood and hyperparameter MCMC."""

from .kriging import (
    PosteriorGaussian,
    condition_prior,
    krige_joint_regression,
    krige_solution,
    krige_source,
    log_marginal_likelihood,
    posterior_factor,
)
from .mcmc import (
    Gamma,
    InvGamma,
    McmcConfig,
    McmcResult,
    PointMass,
    SteadyModel,
    log_accept_ratio,
    log_prior,
    log_target,
    run_chain,
    run_mcmc,
    sigma2_conditional,
)
from .spacetime import SpaceTimePosterior, krige_spacetime

__all__ = [
    "Gamma",
    "InvGamma",
    "McmcConfig",
    "McmcResult",
    "PointMass",
    "PosteriorGaussian",
    "SpaceTimePosterior",
    "SteadyModel",
    "condition_prior",
    "krige_joint_regression",
    "krige_solution",
    "krige_source",
    "krige_spacetime",
    "log_accept_ratio",
    "log_marginal_likelihood",
    "log_prior",
    "log_target",
    "posterior_factor",
    "run_chain",
    "run_mcmc",
    "sigma2_conditional",
]
