"""Approximate minimum degree ordering.

A compiled quotient-graph implementation of the AMD algorithm of Amestoy,
Davis and Duff: element absorption, mass elimination, aggressive
absorption, hash-based supervariable detection and approximate external
degrees.  Rows denser than ``max(16, 10 sqrt(n))`` are ordered last.
"""

import numpy as np
import scipy.sparse as sp
from numba import njit


@njit(cache=True)
def _flip(i):
    return -i - 2


@njit(cache=True)
def _wclear(mark, lemax, w, n):
    if mark < 2 or mark + lemax < 0:
        for k in range(n):
            if w[k] != 0:
                w[k] = 1
        mark = 2
    return mark


@njit(cache=True)
def _tdfs(j, k, head, nxt, post, stack):
    top = 0
    stack[0] = j
    while top >= 0:
        p = stack[top]
        i = head[p]
        if i == -1:
            top -= 1
            post[k] = p
            k += 1
        else:
            head[p] = nxt[i]
            top += 1
            stack[top] = i
    return k


@njit(cache=True)
def _amd_core(Cp_in, Ci_in, n, dense):
    cnz = Cp_in[n]
    nzmax = cnz + cnz // 5 + 2 * n + 1
    Ci = np.zeros(nzmax, dtype=np.int64)
    Ci[:cnz] = Ci_in[:cnz]
    Cp = np.empty(n + 1, dtype=np.int64)
    Cp[:] = Cp_in

    P = np.empty(n + 1, dtype=np.int64)
    length = np.zeros(n + 1, dtype=np.int64)
    nv = np.zeros(n + 1, dtype=np.int64)
    nxt = np.zeros(n + 1, dtype=np.int64)
    head = np.zeros(n + 1, dtype=np.int64)
    elen = np.zeros(n + 1, dtype=np.int64)
    degree = np.zeros(n + 1, dtype=np.int64)
    w = np.zeros(n + 1, dtype=np.int64)
    hhead = np.zeros(n + 1, dtype=np.int64)
    last = P

    for k in range(n):
        length[k] = Cp[k + 1] - Cp[k]
    length[n] = 0
    for i in range(n + 1):
        head[i] = -1
        last[i] = -1
        nxt[i] = -1
        hhead[i] = -1
        nv[i] = 1
        w[i] = 1
        elen[i] = 0
        degree[i] = length[i]
    mark = _wclear(0, 0, w, n)
    elen[n] = -2
    Cp[n] = -1
    w[n] = 0
    nel = 0
    mindeg = 0
    lemax = 0

    for i in range(n):
        d = degree[i]
        if d == 0:
            elen[i] = -2
            nel += 1
            Cp[i] = -1
            w[i] = 0
        elif d > dense:
            nv[i] = 0
            elen[i] = -1
            nel += 1
            Cp[i] = _flip(n)
            nv[n] += 1
        else:
            if head[d] != -1:
                last[head[d]] = i
            nxt[i] = head[d]
            head[d] = i

    while nel < n:
        # select node of minimum approximate degree
        k = -1
        while mindeg < n:
            k = head[mindeg]
            if k != -1:
                break
            mindeg += 1
        if nxt[k] != -1:
            last[nxt[k]] = -1
        head[mindeg] = nxt[k]
        elenk = elen[k]
        nvk = nv[k]
        nel += nvk

        # garbage collection
        if elenk > 0 and cnz + mindeg >= nzmax:
            for j in range(n):
                p = Cp[j]
                if p >= 0:
                    Cp[j] = Ci[p]
                    Ci[p] = _flip(j)
            q = 0
            p = 0
            while p < cnz:
                j = _flip(Ci[p])
                p += 1
                if j >= 0:
                    Ci[q] = Cp[j]
                    Cp[j] = q
                    q += 1
                    for _ in range(length[j] - 1):
                        Ci[q] = Ci[p]
                        q += 1
                        p += 1
            cnz = q

        # construct new element
        dk = 0
        nv[k] = -nvk
        p = Cp[k]
        pk1 = p if elenk == 0 else cnz
        pk2 = pk1
        for k1 in range(1, elenk + 2):
            if k1 > elenk:
                e = k
                pj = p
                ln = length[k] - elenk
            else:
                e = Ci[p]
                p += 1
                pj = Cp[e]
                ln = length[e]
            for _ in range(ln):
                i = Ci[pj]
                pj += 1
                nvi = nv[i]
                if nvi <= 0:
                    continue
                dk += nvi
                nv[i] = -nvi
                Ci[pk2] = i
                pk2 += 1
                if nxt[i] != -1:
                    last[nxt[i]] = last[i]
                if last[i] != -1:
                    nxt[last[i]] = nxt[i]
                else:
                    head[degree[i]] = nxt[i]
            if e != k:
                Cp[e] = _flip(k)
                w[e] = 0
        if elenk != 0:
            cnz = pk2
        degree[k] = dk
        Cp[k] = pk1
        length[k] = pk2 - pk1
        elen[k] = -2

        # set differences |Le \ Lk|
        mark = _wclear(mark, lemax, w, n)
        for pk in range(pk1, pk2):
            i = Ci[pk]
            eln = elen[i]
            if eln <= 0:
                continue
            nvi = -nv[i]
            wnvi = mark - nvi
            for p in range(Cp[i], Cp[i] + eln):
                e = Ci[p]
                if w[e] >= mark:
                    w[e] -= nvi
                elif w[e] != 0:
                    w[e] = degree[e] + wnvi

        # degree update and element absorption
        for pk in range(pk1, pk2):
            i = Ci[pk]
            p1 = Cp[i]
            p2 = p1 + elen[i] - 1
            pn = p1
            h = 0
            d = 0
            for p in range(p1, p2 + 1):
                e = Ci[p]
                if w[e] != 0:
                    dext = w[e] - mark
                    if dext > 0:
                        d += dext
                        Ci[pn] = e
                        pn += 1
                        h += e
                    else:
                        Cp[e] = _flip(k)
                        w[e] = 0
            elen[i] = pn - p1 + 1
            p3 = pn
            p4 = p1 + length[i]
            for p in range(p2 + 1, p4):
                j = Ci[p]
                nvj = nv[j]
                if nvj <= 0:
                    continue
                d += nvj
                Ci[pn] = j
                pn += 1
                h += j
            if d == 0:
                # mass elimination
                Cp[i] = _flip(k)
                nvi = -nv[i]
                dk -= nvi
                nvk += nvi
                nel += nvi
                nv[i] = 0
                elen[i] = -1
            else:
                degree[i] = min(degree[i], d)
                Ci[pn] = Ci[p3]
                Ci[p3] = Ci[p1]
                Ci[p1] = k
                length[i] = pn - p1 + 1
                h = h % n
                nxt[i] = hhead[h]
                hhead[h] = i
                last[i] = h
        degree[k] = dk
        lemax = max(lemax, dk)
        mark = _wclear(mark + lemax, lemax, w, n)

        # supervariable detection
        for pk in range(pk1, pk2):
            i = Ci[pk]
            if nv[i] >= 0:
                continue
            h = last[i]
            i = hhead[h]
            hhead[h] = -1
            while i != -1 and nxt[i] != -1:
                ln = length[i]
                eln = elen[i]
                for p in range(Cp[i] + 1, Cp[i] + ln):
                    w[Ci[p]] = mark
                jlast = i
                j = nxt[i]
                while j != -1:
                    ok = length[j] == ln and elen[j] == eln
                    p = Cp[j] + 1
                    while ok and p <= Cp[j] + ln - 1:
                        if w[Ci[p]] != mark:
                            ok = False
                        p += 1
                    if ok:
                        Cp[j] = _flip(i)
                        nv[i] += nv[j]
                        nv[j] = 0
                        elen[j] = -1
                        j = nxt[j]
                        nxt[jlast] = j
                    else:
                        jlast = j
                        j = nxt[j]
                i = nxt[i]
                mark += 1

        # finalize new element
        p = pk1
        for pk in range(pk1, pk2):
            i = Ci[pk]
            nvi = -nv[i]
            if nvi <= 0:
                continue
            nv[i] = nvi
            d = degree[i] + dk - nvi
            d = min(d, n - nel - nvi)
            if head[d] != -1:
                last[head[d]] = i
            nxt[i] = head[d]
            last[i] = -1
            head[d] = i
            mindeg = min(mindeg, d)
            degree[i] = d
            Ci[p] = i
            p += 1
        nv[k] = nvk
        length[k] = p - pk1
        if length[k] == 0:
            Cp[k] = -1
            w[k] = 0
        if elenk != 0:
            cnz = p

    # postorder the assembly tree
    for i in range(n):
        Cp[i] = _flip(Cp[i])
    for j in range(n + 1):
        head[j] = -1
    for j in range(n, -1, -1):
        if nv[j] > 0:
            continue
        nxt[j] = head[Cp[j]]
        head[Cp[j]] = j
    for e in range(n, -1, -1):
        if nv[e] <= 0:
            continue
        if Cp[e] != -1:
            nxt[e] = head[Cp[e]]
            head[Cp[e]] = e
    k = 0
    for i in range(n + 1):
        if Cp[i] == -1:
            k = _tdfs(i, k, head, nxt, P, w)
    return P


def amd_order(A):
    """Fill-reducing permutation for the symmetric pattern of ``A + A^T``.

    Returns an integer array ``perm`` such that ``A[perm][:, perm]`` has a
    sparse Cholesky factor with (approximately) minimal fill.
    """
    A = sp.csc_matrix(A)
    n = A.shape[0]
    if n <= 2:
        return np.arange(n, dtype=np.int64)
    S = (abs(A) + abs(A.T)).tocsc()
    S.setdiag(0)
    S.eliminate_zeros()
    S.sort_indices()
    dense = max(16, int(10 * np.sqrt(n)))
    dense = min(n - 2, dense)
    P = _amd_core(S.indptr.astype(np.int64), S.indices.astype(np.int64), n, dense)
    # the placeholder root n is always postordered last
    perm = P[:n]
    return np.ascontiguousarray(perm, dtype=np.int64)
