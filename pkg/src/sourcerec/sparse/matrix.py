"""Sparse matrix carrier and Matrix Market interchange.

The package uses :class:`scipy.sparse.csc_matrix` as its sparse matrix
type.  :func:`as_csc` puts any array-like into the canonical form expected
by the factorization code: float64 values, sorted row indices, summed
duplicates.
"""

import numpy as np
import scipy.io
import scipy.sparse as sp

from ..errors import ShapeMismatch


def as_csc(A, copy=False):
    """Return ``A`` as a canonical float64 CSC matrix."""
    if sp.issparse(A):
        out = sp.csc_matrix(A, dtype=np.float64, copy=copy)
    else:
        arr = np.asarray(A, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr[:, None]
        out = sp.csc_matrix(arr)
    if not out.has_canonical_format:
        # canonicalize a private copy, never the caller's arrays
        out = out.copy()
        out.sum_duplicates()
        out.sort_indices()
    return out


def check_square(A, name="matrix"):
    if A.shape[0] != A.shape[1]:
        raise ShapeMismatch(f"{name} must be square, got shape {A.shape}")


def symmetric_from_lower(A):
    """Full symmetric matrix built from the lower triangle of ``A``."""
    A = as_csc(A)
    low = sp.tril(A, format="csc")
    strict = sp.tril(A, k=-1, format="csc")
    return as_csc(low + strict.T)


def validate(A):
    """Check the compressed-column invariants; raise ShapeMismatch if broken."""
    A = sp.csc_matrix(A)
    nrows, ncols = A.shape
    p = A.indptr
    if p.shape[0] != ncols + 1 or p[0] != 0 or np.any(np.diff(p) < 0):
        raise ShapeMismatch("column offsets are malformed")
    if p[-1] != A.data.shape[0]:
        raise ShapeMismatch("last offset does not match the value count")
    for j in range(ncols):
        rows = A.indices[p[j]:p[j + 1]]
        if rows.size and (np.any(np.diff(rows) <= 0) or rows[-1] >= nrows or rows[0] < 0):
            raise ShapeMismatch(f"row indices of column {j} are not strictly increasing and in range")
    return True


def read_matrix_market(path):
    """Read a real coordinate Matrix Market file (general or symmetric)."""
    A = scipy.io.mmread(str(path))
    return as_csc(A)


def write_matrix_market(path, A, symmetric=False):
    """Write ``A`` in coordinate format.

    With ``symmetric=True`` only the lower triangle is written and the
    header declares the matrix symmetric.
    """
    A = as_csc(A)
    if symmetric:
        check_square(A)
        scipy.io.mmwrite(str(path), sp.tril(A).tocoo(), symmetry="symmetric")
    else:
        scipy.io.mmwrite(str(path), A.tocoo(), symmetry="general")
