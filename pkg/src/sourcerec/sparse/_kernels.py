"""Compiled inner loops for the simplicial sparse Cholesky.

All routines work on raw compressed-column arrays.  The input to the
symbolic and numeric phases is the *upper* triangle of the already
permuted matrix ``C = P Q P^T`` (column ``k`` of ``triu(C)`` is row ``k``
of the lower triangle).  Factors are stored column-wise with the diagonal
entry first in every column and row indices increasing.
"""

import numpy as np
from numba import njit

INDEX = np.int32


@njit(cache=True)
def etree(Cp, Ci, n):
    """Elimination tree of a symmetric matrix given by its upper triangle."""
    parent = np.full(n, -1, dtype=np.int64)
    ancestor = np.full(n, -1, dtype=np.int64)
    for k in range(n):
        for p in range(Cp[k], Cp[k + 1]):
            i = Ci[p]
            while i != -1 and i < k:
                inext = ancestor[i]
                ancestor[i] = k
                if inext == -1:
                    parent[i] = k
                i = inext
    return parent


@njit(cache=True)
def _ereach(Cp, Ci, k, parent, s, mark):
    # Pattern of row k of L, returned in s[top:n] (topological order).
    n = parent.shape[0]
    top = n
    mark[k] = k
    for p in range(Cp[k], Cp[k + 1]):
        i = Ci[p]
        if i > k:
            continue
        length = 0
        while mark[i] != k:
            s[length] = i
            length += 1
            mark[i] = k
            i = parent[i]
        while length > 0:
            top -= 1
            length -= 1
            s[top] = s[length]
    return top


@njit(cache=True)
def column_counts(Cp, Ci, parent):
    """Number of entries (diagonal included) in every column of L."""
    n = parent.shape[0]
    counts = np.ones(n, dtype=np.int64)
    s = np.empty(n, dtype=np.int64)
    mark = np.full(n, -1, dtype=np.int64)
    for k in range(n):
        top = _ereach(Cp, Ci, k, parent, s, mark)
        for t in range(top, n):
            counts[s[t]] += 1
    return counts


@njit(cache=True)
def numeric_cholesky(Cp, Ci, Cx, parent, Lp, pivot_tol):
    """Up-looking numeric factorization.

    Returns ``(Li, Lx, info)`` where ``info`` is -1 on success and the
    failing pivot index otherwise.
    """
    n = parent.shape[0]
    nnz = Lp[n]
    Li = np.empty(nnz, dtype=np.int32)
    Lx = np.zeros(nnz, dtype=np.float64)
    c = Lp[:n].copy()
    x = np.zeros(n, dtype=np.float64)
    s = np.empty(n, dtype=np.int64)
    mark = np.full(n, -1, dtype=np.int64)
    for k in range(n):
        # diagonal goes first in column k
        Li[c[k]] = k
        c[k] += 1
        top = _ereach(Cp, Ci, k, parent, s, mark)
        x[k] = 0.0
        for p in range(Cp[k], Cp[k + 1]):
            if Ci[p] <= k:
                x[Ci[p]] += Cx[p]
        d = x[k]
        x[k] = 0.0
        for t in range(top, n):
            i = s[t]
            lki = x[i] / Lx[Lp[i]]
            x[i] = 0.0
            for p in range(Lp[i] + 1, c[i]):
                x[Li[p]] -= Lx[p] * lki
            d -= lki * lki
            p = c[i]
            c[i] += 1
            Li[p] = k
            Lx[p] = lki
        if not d > pivot_tol:
            return Li, Lx, k
        Lx[Lp[k]] = np.sqrt(d)
    return Li, Lx, -1


@njit(cache=True)
def lsolve(Lp, Li, Lx, B):
    """Solve L X = B in place (B is n x k, C-contiguous)."""
    n = Lp.shape[0] - 1
    nr = B.shape[1]
    for j in range(n):
        d = Lx[Lp[j]]
        for r in range(nr):
            B[j, r] /= d
        for p in range(Lp[j] + 1, Lp[j + 1]):
            i = Li[p]
            v = Lx[p]
            if v != 0.0:
                for r in range(nr):
                    B[i, r] -= v * B[j, r]


@njit(cache=True)
def ltsolve(Lp, Li, Lx, B):
    """Solve L^T X = B in place (B is n x k, C-contiguous)."""
    n = Lp.shape[0] - 1
    nr = B.shape[1]
    for j in range(n - 1, -1, -1):
        for p in range(Lp[j] + 1, Lp[j + 1]):
            i = Li[p]
            v = Lx[p]
            if v != 0.0:
                for r in range(nr):
                    B[j, r] -= v * B[i, r]
        d = Lx[Lp[j]]
        for r in range(nr):
            B[j, r] /= d


@njit(cache=True)
def parent_from_factor(Lp, Li):
    n = Lp.shape[0] - 1
    parent = np.full(n, -1, dtype=np.int64)
    for j in range(n):
        if Lp[j + 1] - Lp[j] > 1:
            parent[j] = Li[Lp[j] + 1]
    return parent


@njit(cache=True)
def pattern_contains(Lp, Li, wi):
    """True if the sorted index set ``wi`` lies inside column wi[0] of L."""
    f = wi[0]
    q = 1
    p = Lp[f] + 1
    end = Lp[f + 1]
    while q < wi.shape[0]:
        while p < end and Li[p] < wi[q]:
            p += 1
        if p == end or Li[p] != wi[q]:
            return False
        q += 1
    return True


@njit(cache=True)
def updown(Lp, Li, Lx, parent, wi, wx, sigma, work):
    """Rank-1 update (sigma=+1) or downdate (sigma=-1) of L in place.

    The pattern of L must already contain the pattern of the result.
    ``work`` is a zero vector of length n and is returned zeroed.
    Returns -1 on success or the failing column.
    """
    if wi.shape[0] == 0:
        return -1
    f = wi[0]
    for q in range(wi.shape[0]):
        if wi[q] < f:
            f = wi[q]
        work[wi[q]] = wx[q]
    beta = 1.0
    status = -1
    j = f
    while j != -1:
        p = Lp[j]
        alpha = work[j] / Lx[p]
        beta2 = beta * beta + sigma * alpha * alpha
        if not beta2 > 0.0:
            status = j
            break
        beta2 = np.sqrt(beta2)
        if sigma > 0:
            delta = beta / beta2
            gamma = alpha / (beta2 * beta)
            Lx[p] = delta * Lx[p] + gamma * work[j]
        else:
            delta = beta2 / beta
            gamma = -alpha / (beta2 * beta)
            Lx[p] = delta * Lx[p]
        work[j] = 0.0
        beta = beta2
        for p in range(Lp[j] + 1, Lp[j + 1]):
            i = Li[p]
            w1 = work[i]
            w2 = w1 - alpha * Lx[p]
            work[i] = w2
            if sigma > 0:
                Lx[p] = delta * Lx[p] + gamma * w1
            else:
                Lx[p] = delta * Lx[p] + gamma * w2
        j = parent[j]
    # clear whatever the walk left behind
    j = f
    while j != -1:
        work[j] = 0.0
        for p in range(Lp[j] + 1, Lp[j + 1]):
            work[Li[p]] = 0.0
        j = parent[j]
    return status


@njit(cache=True)
def updown_many(Lp, Li, Lx, parent, Wp, Wi, Wx, sigma):
    """Apply one rank-1 modification per column of W (CSC arrays)."""
    n = Lp.shape[0] - 1
    work = np.zeros(n, dtype=np.float64)
    for c in range(Wp.shape[0] - 1):
        a = Wp[c]
        b = Wp[c + 1]
        if b == a:
            continue
        status = updown(Lp, Li, Lx, parent, Wi[a:b], Wx[a:b], sigma, work)
        if status >= 0:
            return status
    return -1


@njit(cache=True)
def scatter_into_pattern(Lp_old, Li_old, Lx_old, Lp_new, Li_new):
    """Copy factor values into a (super)pattern, zero-filling new slots."""
    n = Lp_old.shape[0] - 1
    Lx_new = np.zeros(Lp_new[n], dtype=np.float64)
    for j in range(n):
        q = Lp_new[j]
        for p in range(Lp_old[j], Lp_old[j + 1]):
            r = Li_old[p]
            while Li_new[q] != r:
                q += 1
            Lx_new[q] = Lx_old[p]
    return Lx_new


@njit(cache=True)
def symbolic_pattern(Cp, Ci, parent, Lp):
    """Row indices of L (diagonal first) without computing values."""
    n = parent.shape[0]
    Li = np.empty(Lp[n], dtype=np.int32)
    c = Lp[:n].copy()
    s = np.empty(n, dtype=np.int64)
    mark = np.full(n, -1, dtype=np.int64)
    for k in range(n):
        Li[c[k]] = k
        c[k] += 1
        top = _ereach(Cp, Ci, k, parent, s, mark)
        for t in range(top, n):
            i = s[t]
            Li[c[i]] = k
            c[i] += 1
    return Li


@njit(cache=True)
def selected_inverse(Lp, Li, Lx):
    """Entries of (L L^T)^{-1} on the pattern of L (Takahashi recursion)."""
    n = Lp.shape[0] - 1
    Zx = np.zeros(Lp[n], dtype=np.float64)
    pos = np.full(n, -1, dtype=np.int64)
    acc = np.zeros(n, dtype=np.float64)
    for j in range(n - 1, -1, -1):
        p0 = Lp[j]
        p1 = Lp[j + 1]
        ljj = Lx[p0]
        for q in range(p0 + 1, p1):
            pos[Li[q]] = q
        for q in range(p0 + 1, p1):
            l = Li[q]
            llj = Lx[q]
            acc[l] += Zx[Lp[l]] * llj
            for p in range(Lp[l] + 1, Lp[l + 1]):
                r = Li[p]
                pr = pos[r]
                if pr >= 0:
                    z = Zx[p]
                    acc[r] += z * llj
                    acc[l] += z * Lx[pr]
        s = 0.0
        for q in range(p0 + 1, p1):
            l = Li[q]
            Zx[q] = -acc[l] / ljj
            s += Zx[q] * Lx[q]
            acc[l] = 0.0
            pos[l] = -1
        Zx[p0] = 1.0 / (ljj * ljj) - s / ljj
    return Zx


@njit(cache=True)
def lookup(Lp, Li, Zx, i, j):
    """Entry (i, j) of a symmetric matrix stored on L's pattern, or NaN."""
    if i < j:
        i, j = j, i
    lo = Lp[j]
    hi = Lp[j + 1]
    while lo < hi:
        mid = (lo + hi) // 2
        r = Li[mid]
        if r == i:
            return Zx[mid]
        if r < i:
            lo = mid + 1
        else:
            hi = mid
    return np.nan


@njit(cache=True)
def sandwich_diag(Bp, Bj, Bx, Lp, Li, Zx):
    """diag(B Z B^T) for CSR arrays of B (columns already permuted).

    Rows that need an entry of Z outside the stored pattern get NaN.
    """
    m = Bp.shape[0] - 1
    out = np.zeros(m, dtype=np.float64)
    for r in range(m):
        acc = 0.0
        ok = True
        for a in range(Bp[r], Bp[r + 1]):
            for b in range(Bp[r], Bp[r + 1]):
                z = lookup(Lp, Li, Zx, Bj[a], Bj[b])
                if z != z:
                    ok = False
                    break
                acc += Bx[a] * Bx[b] * z
            if not ok:
                break
        out[r] = acc if ok else np.nan
    return out
