"""Simplicial sparse Cholesky factorization and the operations built on it.

A :class:`CholeskyFactor` stores ``P Q P^T = L L^T`` where ``P`` is the
permutation given by ``perm`` (``(P x)[k] = x[perm[k]]``).  ``L`` is kept as
raw compressed-column arrays with the diagonal first in each column, which
is the layout the compiled kernels in :mod:`._kernels` expect.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from ..errors import NotPositiveDefinite, ShapeMismatch
from . import _kernels as kern
from .amd import amd_order
from .matrix import as_csc, check_square, symmetric_from_lower

PIVOT_RTOL = 1e-12


@dataclass(frozen=True)
class Symbolic:
    """Ordering and pattern of a factor, reusable across numeric refactorizations."""

    perm: np.ndarray
    parent: np.ndarray
    Lp: np.ndarray
    Li: np.ndarray

    @property
    def n(self):
        return self.perm.shape[0]

    @property
    def nnz(self):
        return int(self.Lp[-1])


class CholeskyFactor:
    """Lower-triangular factor of a permuted SPD matrix.

    Instances are treated as immutable: every modifying operation returns a
    new factor.
    """

    def __init__(self, perm, Lp, Li, Lx, parent=None):
        self.perm = np.ascontiguousarray(perm, dtype=np.int64)
        self.Lp = np.ascontiguousarray(Lp, dtype=np.int64)
        self.Li = np.ascontiguousarray(Li, dtype=np.int32)
        self.Lx = np.ascontiguousarray(Lx, dtype=np.float64)
        if parent is None:
            parent = kern.parent_from_factor(self.Lp, self.Li)
        self.parent = parent
        self.iperm = np.empty_like(self.perm)
        self.iperm[self.perm] = np.arange(self.perm.shape[0])
        self._zx = None

    @property
    def n(self):
        return self.perm.shape[0]

    dimension = n

    @property
    def nnz(self):
        return int(self.Lp[-1])

    @property
    def symbolic(self):
        return Symbolic(self.perm, self.parent, self.Lp, self.Li)

    @property
    def L(self):
        """The factor as a scipy CSC matrix (permuted coordinates)."""
        return sp.csc_matrix((self.Lx, self.Li, self.Lp), shape=(self.n, self.n))

    def diagonal(self):
        return self.Lx[self.Lp[:-1]]

    # ------------------------------------------------------------------
    def solve(self, b, mode="full"):
        return solve(self, b, mode)

    def logdet(self):
        return logdet(self)

    def sample(self, rng, size=None):
        """Draw from N(0, Q^{-1}); ``size`` adds a trailing sample axis."""
        k = 1 if size is None else int(size)
        z = rng.standard_normal((self.n, k))
        kern.ltsolve(self.Lp, self.Li, self.Lx, z)
        x = z[self.iperm]
        return x[:, 0] if size is None else x

    def selected_inverse(self):
        """Entries of Q^{-1} on the pattern of L (permuted coordinates)."""
        if self._zx is None:
            self._zx = kern.selected_inverse(self.Lp, self.Li, self.Lx)
        return self._zx

    def marginal_variances(self):
        """diag(Q^{-1}) in original coordinates."""
        zx = self.selected_inverse()
        return zx[self.Lp[:-1]][self.iperm]

    def sandwich_variances(self, B):
        """diag(B Q^{-1} B^T) for a sparse ``B``.

        Rows whose pattern reaches outside the selected inverse fall back to
        explicit solves.
        """
        B = sp.csr_matrix(B, dtype=np.float64)
        if B.shape[1] != self.n:
            raise ShapeMismatch(f"B has {B.shape[1]} columns, factor has dimension {self.n}")
        Bp = B[:, self.perm].tocsr()
        Bp.sort_indices()
        out = kern.sandwich_diag(Bp.indptr.astype(np.int64), Bp.indices.astype(np.int64),
                                 Bp.data, self.Lp, self.Li, self.selected_inverse())
        bad = np.flatnonzero(np.isnan(out))
        if bad.size:
            rows = B[bad].T.toarray()[self.perm]
            y = solve(self, rows, "lower")
            out[bad] = np.einsum("ij,ij->j", y, y)
        return out


def _pivot_tol(diag):
    m = np.max(np.abs(diag)) if diag.size else 0.0
    return PIVOT_RTOL * m


def cholesky(Q, ordering="amd", symbolic=None):
    """Factorize a sparse SPD matrix.

    Parameters
    ----------
    Q : sparse or array_like
        Square matrix; only its lower triangle is read.
    ordering : {"amd", "natural"} or array_like
        Fill-reducing ordering, no reordering, or an explicit permutation.
    symbolic : Symbolic, optional
        Analysis of an earlier factorization; its ordering is reused, which
        skips the (comparatively expensive) ordering step.

    Returns
    -------
    CholeskyFactor

    Raises
    ------
    NotPositiveDefinite
        If a pivot falls below ``1e-12 * max(diag(Q))``.
    """
    Q = as_csc(Q)
    check_square(Q, "Q")
    n = Q.shape[0]
    low = sp.tril(Q, format="coo")
    if symbolic is not None:
        if symbolic.n != n:
            raise ShapeMismatch("symbolic analysis has the wrong dimension")
        perm = symbolic.perm
    elif isinstance(ordering, str):
        if ordering == "natural":
            perm = np.arange(n, dtype=np.int64)
        elif ordering in ("amd", "fill-reducing"):
            perm = amd_order(symmetric_from_lower(Q))
        else:
            raise ValueError(f"unknown ordering {ordering!r}")
    else:
        perm = np.asarray(ordering, dtype=np.int64)
        if perm.shape != (n,) or not np.array_equal(np.sort(perm), np.arange(n)):
            raise ShapeMismatch("ordering is not a permutation of the right length")
    C = _permuted_upper(low, perm, n)
    Cp = C.indptr.astype(np.int64)
    Ci = C.indices.astype(np.int32)

    parent = kern.etree(Cp, Ci, n)
    counts = kern.column_counts(Cp, Ci, parent)
    Lp = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=Lp[1:])
    tol = _pivot_tol(Q.diagonal())
    Li, Lx, info = kern.numeric_cholesky(Cp, Ci, C.data, parent, Lp, tol)
    if info >= 0:
        raise NotPositiveDefinite(info)
    return CholeskyFactor(perm, Lp, Li, Lx, parent)


class FactorPlan:
    """Analysis of a fixed sparsity pattern, for repeated numeric factorization.

    The ordering, the layout of the permuted upper triangle, the elimination
    tree and the column counts are computed once; :meth:`factor` then only
    scatters new values and runs the numeric kernel.

    Parameters
    ----------
    Q : sparse
        Matrix whose (canonical csc) pattern is shared by all later inputs.
    ordering : as for :func:`cholesky`
    """

    def __init__(self, Q, ordering="amd"):
        Q = as_csc(Q, copy=True)
        check_square(Q, "Q")
        n = Q.shape[0]
        self.n = n
        self.indptr = Q.indptr.copy()
        self.indices = Q.indices.copy()
        F = cholesky(Q, ordering)
        self.perm = F.perm
        cols = np.repeat(np.arange(n), np.diff(Q.indptr))
        lower = np.flatnonzero(Q.indices >= cols)
        pinv = F.iperm
        a = pinv[Q.indices[lower]]
        b = pinv[cols[lower]]
        C = sp.csc_matrix((np.arange(1.0, lower.shape[0] + 1), (np.minimum(a, b), np.maximum(a, b))), shape=(n, n))
        C.sort_indices()
        self._lower = lower
        self._slot = np.empty(lower.shape[0], dtype=np.int64)
        self._slot[C.data.astype(np.int64) - 1] = np.arange(C.nnz)
        self.Cp = C.indptr.astype(np.int64)
        self.Ci = C.indices.astype(np.int32)
        self.parent = F.parent
        self.Lp = F.Lp

    def matches(self, Q):
        return (Q.shape == (self.n, self.n) and np.array_equal(Q.indptr, self.indptr)
                and np.array_equal(Q.indices, self.indices))

    def factor(self, data):
        """Factor the matrix with this pattern and values ``data`` (csc order)."""
        data = np.asarray(data, dtype=np.float64)
        low = data[self._lower]
        Cx = np.empty(low.shape[0])
        Cx[self._slot] = low
        diag = Cx[self.Cp[1:] - 1]
        tol = _pivot_tol(diag)
        Li, Lx, info = kern.numeric_cholesky(self.Cp, self.Ci, Cx, self.parent, self.Lp, tol)
        if info >= 0:
            raise NotPositiveDefinite(info)
        return CholeskyFactor(self.perm, self.Lp, Li, Lx, self.parent)


def _permuted_upper(low, perm, n):
    """Upper triangle of ``P Q P^T`` from the lower-triangle entries of ``Q``."""
    pinv = np.empty(n, dtype=np.int64)
    pinv[perm] = np.arange(n)
    a = pinv[low.row]
    b = pinv[low.col]
    C = sp.csc_matrix((low.data, (np.minimum(a, b), np.maximum(a, b))), shape=(n, n))
    C.sum_duplicates()
    C.sort_indices()
    return C


def _lower_quadform(Q, x):
    """``x^T Q x`` reading only the lower triangle of ``Q``."""
    low = sp.tril(Q, format="coo")
    w = np.where(low.row == low.col, 1.0, 2.0)
    return float(np.sum(w * low.data * x[low.row] * x[low.col]))


def _pattern_superset(F, Wp):
    """Symbolic analysis of pattern(L + L^T) union pattern(W W^T)."""
    n = F.n
    Lpat = sp.csc_matrix((np.ones(F.nnz), F.Li, F.Lp), shape=(n, n))
    Wpat = sp.csc_matrix((np.ones(Wp.nnz), Wp.indices, Wp.indptr), shape=Wp.shape)
    S = sp.triu(Lpat.T + Wpat @ Wpat.T, format="csc")
    S.sort_indices()
    Cp = S.indptr.astype(np.int64)
    Ci = S.indices.astype(np.int32)
    parent = kern.etree(Cp, Ci, n)
    counts = kern.column_counts(Cp, Ci, parent)
    Lp = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=Lp[1:])
    Li = kern.symbolic_pattern(Cp, Ci, parent, Lp)
    return parent, Lp, Li


def lowrank_update(F, W, sign=+1):
    """Factor of ``Q + sign * W W^T`` under the same permutation as ``F``.

    Each column of ``W`` is applied as one rank-1 hyperbolic update, left to
    right.  When a column's pattern is not already covered by ``L`` the
    symbolic structure is enlarged first.
    """
    if sign in ("+", 1, 1.0):
        sigma = 1
    elif sign in ("-", -1, -1.0):
        sigma = -1
    else:
        raise ValueError(f"sign must be + or -, got {sign!r}")
    W = as_csc(W)
    if W.shape[0] != F.n:
        raise ShapeMismatch(f"W has {W.shape[0]} rows, factor has dimension {F.n}")
    # row permutation by relabelling indices (cheaper than fancy indexing)
    Wp = sp.csc_matrix((W.data.copy(), F.iperm[W.indices], W.indptr.copy()), shape=W.shape)
    Wp.eliminate_zeros()
    Wp.has_sorted_indices = False
    Wp.sort_indices()
    Wp_ptr = Wp.indptr.astype(np.int64)
    Wi = Wp.indices.astype(np.int64)

    fits = True
    for c in range(Wp.shape[1]):
        a, b = Wp_ptr[c], Wp_ptr[c + 1]
        if b - a > 1 and not kern.pattern_contains(F.Lp, F.Li, Wi[a:b]):
            fits = False
            break
    if fits:
        Lp, Li, parent = F.Lp, F.Li, F.parent
        Lx = F.Lx.copy()
    else:
        parent, Lp, Li = _pattern_superset(F, Wp)
        Lx = kern.scatter_into_pattern(F.Lp, F.Li, F.Lx, Lp, Li)
    status = kern.updown_many(Lp, Li, Lx, parent, Wp_ptr, Wi, Wp.data, sigma)
    if status >= 0:
        raise NotPositiveDefinite(status, message=f"downdate lost positive definiteness at column {status}")
    return CholeskyFactor(F.perm, Lp, Li, Lx, parent)


def solve(F, b, mode="full"):
    """Solve with a factor.

    ``mode="full"`` returns ``Q^{-1} b`` in original coordinates.  The
    triangular modes work entirely in permuted coordinates: ``"lower"``
    returns ``L^{-1} b`` and ``"upper"`` returns ``L^{-T} b``.  ``b`` may be a
    vector or an ``n x k`` array.
    """
    b = np.asarray(b, dtype=np.float64)
    if b.shape[0] != F.n:
        raise ShapeMismatch(f"right-hand side has length {b.shape[0]}, expected {F.n}")
    vec = b.ndim == 1
    B = b[:, None] if vec else b
    if mode == "full":
        X = np.ascontiguousarray(B[F.perm])
        kern.lsolve(F.Lp, F.Li, F.Lx, X)
        kern.ltsolve(F.Lp, F.Li, F.Lx, X)
        X = X[F.iperm]
    elif mode in ("lower", "lower-only"):
        X = np.array(B, order="C", copy=True)
        kern.lsolve(F.Lp, F.Li, F.Lx, X)
    elif mode in ("upper", "upper-only"):
        X = np.array(B, order="C", copy=True)
        kern.ltsolve(F.Lp, F.Li, F.Lx, X)
    else:
        raise ValueError(f"unknown solve mode {mode!r}")
    return X[:, 0] if vec else X


def logdet(F):
    """log det Q = 2 sum log diag(L)."""
    return 2.0 * float(np.sum(np.log(F.diagonal())))


def selected_trace(F, Mleft, Mright, block=256):
    """tr(Mleft Q^{-1} Mright) by solving against columns of ``Mright``."""
    Ml = sp.csr_matrix(Mleft, dtype=np.float64)
    Mr = sp.csc_matrix(Mright, dtype=np.float64)
    if Ml.shape[1] != F.n or Mr.shape[0] != F.n or Ml.shape[0] != Mr.shape[1]:
        raise ShapeMismatch(
            f"cannot form trace of {Ml.shape} x Q^-1({F.n}) x {Mr.shape}")
    total = 0.0
    k = Mr.shape[1]
    for start in range(0, k, block):
        stop = min(k, start + block)
        X = solve(F, Mr[:, start:stop].toarray())
        # tr over the block: sum_j (Mleft[j, :] . X[:, j - start])
        rows = Ml[start:stop]
        total += float(rows.multiply(X.T).sum())
    return total


def stabilized_quadform(Q, O, sigma2, d, inner=None):
    """d^T (O Q^{-1} O^T + sigma2 I)^{-1} d without forming the dense matrix.

    With ``H = Q + O^T O / sigma2`` (factored sparsely), ``x = H^{-1} O^T d /
    sigma2`` and ``r = d - O x`` the value equals ``|r|^2 / sigma2 +
    x^T Q x``, a sum of two non-negative terms.

    Parameters
    ----------
    Q : sparse
        SPD prior precision.
    O : sparse
        Observation operator, ``len(d)`` rows.
    sigma2 : float
        Noise variance, positive.
    d : array_like
        Residual vector.
    inner : CholeskyFactor, optional
        Existing factor of ``H``.
    """
    Q = as_csc(Q)
    O = sp.csr_matrix(O, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    if O.shape[0] != d.shape[0] or O.shape[1] != Q.shape[0]:
        raise ShapeMismatch("O, Q and d do not conform")
    if not sigma2 > 0:
        raise ValueError("sigma2 must be positive")
    if not np.any(d):
        return 0.0
    if inner is None:
        inner = cholesky(symmetric_from_lower(Q) + (O.T @ O) / sigma2)
    x = solve(inner, O.T @ d) / sigma2
    r = d - O @ x
    val = float(r @ r) / sigma2 + _lower_quadform(Q, x)
    return max(val, 0.0)
