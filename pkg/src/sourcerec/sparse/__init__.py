"""Sparse linear algebra: Cholesky factors, low-rank updates, traces."""

from .amd import amd_order
from .cholesky import (
    CholeskyFactor,
    FactorPlan,
    Symbolic,
    cholesky,
    logdet,
    lowrank_update,
    selected_trace,
    solve,
    stabilized_quadform,
)
from .matrix import as_csc, read_matrix_market, symmetric_from_lower, validate, write_matrix_market

__all__ = [
    "CholeskyFactor",
    "FactorPlan",
    "Symbolic",
    "amd_order",
    "as_csc",
    "cholesky",
    "logdet",
    "lowrank_update",
    "read_matrix_market",
    "selected_trace",
    "solve",
    "stabilized_quadform",
    "symmetric_from_lower",
    "validate",
    "write_matrix_market",
]
