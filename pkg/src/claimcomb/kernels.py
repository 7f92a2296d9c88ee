"""Hot numeric kernels, each with a numba and a pure-numpy implementation.

The public names at the bottom of the module point at the numba versions
unless ``CLAIMCOMB_DISABLE_NUMBA`` is set (see ``_backend``). Both
implementations stay importable as ``NUMPY_KERNELS`` / ``NUMBA_KERNELS`` so
tests and the benchmark can compare them directly.

Kernels:

``centered_weighted_sum(y, ranks)``
    compensated sum of ``y_i * (ranks_i - (n + 1) / 2)``.
``subset_lstsq(R, c, masks, tol)``
    least squares ``min ||c - R[:, cols] b||`` for every column subset
    encoded in ``masks``; column 0 of ``R`` is always included.
``level_splits(X, order, resid, node, n_nodes, min_leaf, min_gain)``
    best axis-aligned squared-error split for every open node of one tree
    level.
``tree_apply(X, feature, threshold, value, depth)``
    evaluate a heap-ordered regression tree.
"""
import math
from types import SimpleNamespace

import numpy as np
from scipy.linalg import solve_triangular

from ._backend import HAVE_NUMBA, USE_NUMBA


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------


def _np_centered_weighted_sum(y, ranks):
    n = y.shape[0]
    center = 0.5 * (n + 1)
    # math.fsum is correctly rounded, hence exactly odd under negation.
    return math.fsum((y * (ranks - center)).tolist())


def _np_subset_lstsq(R, c, masks, tol):
    p = R.shape[1]
    m = masks.shape[0]
    coefs = np.zeros((m, p))
    rss = np.zeros(m)
    ok = np.zeros(m, dtype=np.bool_)
    bits = np.arange(p - 1)
    for s in range(m):
        sel = np.concatenate(([0], 1 + bits[(masks[s] >> bits) & 1 == 1]))
        A = R[:, sel]
        q, r = np.linalg.qr(A)
        if np.any(np.abs(np.diag(r)) <= tol):
            continue
        b = solve_triangular(r, q.T @ c)
        coefs[s, sel] = b
        res = c - A @ b
        rss[s] = res @ res
        ok[s] = True
    return coefs, rss, ok


def _np_level_splits(X, order, resid, node, n_nodes, min_leaf, min_gain):
    n, k = X.shape
    feat = np.full(n_nodes, -1, dtype=np.int64)
    thr = np.zeros(n_nodes)
    best = np.array(min_gain, dtype=np.float64, copy=True)
    active = node >= 0
    cnt = np.bincount(node[active], minlength=n_nodes)
    tot = np.bincount(node[active], weights=resid[active], minlength=n_nodes)
    for j in range(k):
        oj = order[:, j]
        nd_sorted = node[oj]
        for nd in range(n_nodes):
            nt = cnt[nd]
            if nt < 2 * min_leaf:
                continue
            sub = oj[nd_sorted == nd]
            vals = X[sub, j]
            cs = np.cumsum(resid[sub])
            nl = np.arange(1, nt, dtype=np.float64)
            valid = vals[:-1] < vals[1:]
            valid &= (nl >= min_leaf) & (nt - nl >= min_leaf)
            if not valid.any():
                continue
            sl = cs[:-1]
            sr = tot[nd] - sl
            gain = sl * sl / nl + sr * sr / (nt - nl) - tot[nd] * tot[nd] / nt
            gain = np.where(valid, gain, -np.inf)
            t = int(np.argmax(gain))
            if gain[t] > best[nd]:
                best[nd] = gain[t]
                feat[nd] = j
                lo, hi = vals[t], vals[t + 1]
                mid = 0.5 * (lo + hi)
                thr[nd] = lo if mid >= hi else mid
    return feat, thr, best


def _np_tree_apply(X, feature, threshold, value, depth):
    n = X.shape[0]
    idx = np.zeros(n, dtype=np.int64)
    rows = np.arange(n)
    for _ in range(depth):
        f = feature[idx]
        internal = f >= 0
        if not internal.any():
            break
        fx = X[rows, np.where(internal, f, 0)]
        go_left = fx <= threshold[idx]
        child = np.where(go_left, 2 * idx + 1, 2 * idx + 2)
        idx = np.where(internal, child, idx)
    return value[idx]


NUMPY_KERNELS = SimpleNamespace(
    name="numpy",
    centered_weighted_sum=_np_centered_weighted_sum,
    subset_lstsq=_np_subset_lstsq,
    level_splits=_np_level_splits,
    tree_apply=_np_tree_apply,
)


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

NUMBA_KERNELS = None

if HAVE_NUMBA:
    from numba import njit

    @njit(cache=True, nogil=True)
    def _nb_centered_weighted_sum(y, ranks):
        # Neumaier summation; every step is sign-symmetric.
        n = y.shape[0]
        center = 0.5 * (n + 1)
        s = 0.0
        comp = 0.0
        for i in range(n):
            term = y[i] * (ranks[i] - center)
            t = s + term
            if abs(s) >= abs(term):
                comp += (s - t) + term
            else:
                comp += (term - t) + s
            s = t
        return s + comp

    @njit(cache=True, nogil=True)
    def _nb_householder_lstsq(A, b, tol, out):
        # Solves min ||b - A x|| in place (A and b are scratch copies).
        # Returns the residual sum of squares, or -1.0 when rank deficient.
        p, q = A.shape
        diag = np.empty(q)
        for j in range(q):
            s = 0.0
            for i in range(j, p):
                s += A[i, j] * A[i, j]
            nrm = math.sqrt(s)
            if nrm <= tol:
                return -1.0
            alpha = -nrm if A[j, j] >= 0.0 else nrm
            v0 = A[j, j] - alpha
            vn2 = s - A[j, j] * A[j, j] + v0 * v0
            A[j, j] = v0
            diag[j] = alpha
            if vn2 > 0.0:
                for k in range(j + 1, q):
                    d = 0.0
                    for i in range(j, p):
                        d += A[i, j] * A[i, k]
                    f = 2.0 * d / vn2
                    for i in range(j, p):
                        A[i, k] -= f * A[i, j]
                d = 0.0
                for i in range(j, p):
                    d += A[i, j] * b[i]
                f = 2.0 * d / vn2
                for i in range(j, p):
                    b[i] -= f * A[i, j]
        for j in range(q - 1, -1, -1):
            acc = b[j]
            for k in range(j + 1, q):
                acc -= A[j, k] * out[k]
            out[j] = acc / diag[j]
        rss = 0.0
        for i in range(q, p):
            rss += b[i] * b[i]
        return rss

    @njit(cache=True, nogil=True)
    def _nb_subset_lstsq(R, c, masks, tol):
        p = R.shape[0]
        ncol = R.shape[1]
        m = masks.shape[0]
        coefs = np.zeros((m, ncol))
        rss = np.zeros(m)
        ok = np.zeros(m, dtype=np.bool_)
        sel = np.empty(ncol, dtype=np.int64)
        x = np.empty(ncol)
        for s in range(m):
            q = 1
            sel[0] = 0
            for j in range(ncol - 1):
                if (masks[s] >> j) & 1:
                    sel[q] = j + 1
                    q += 1
            A = np.empty((p, q))
            for i in range(p):
                for jj in range(q):
                    A[i, jj] = R[i, sel[jj]]
            b = c.copy()
            r = _nb_householder_lstsq(A, b, tol, x)
            if r < 0.0:
                continue
            for jj in range(q):
                coefs[s, sel[jj]] = x[jj]
            rss[s] = r
            ok[s] = True
        return coefs, rss, ok

    @njit(cache=True, nogil=True)
    def _nb_level_splits(X, order, resid, node, n_nodes, min_leaf, min_gain):
        n, k = X.shape
        feat = np.full(n_nodes, -1, dtype=np.int64)
        thr = np.zeros(n_nodes)
        best = min_gain.copy()
        cnt = np.zeros(n_nodes, dtype=np.int64)
        tot = np.zeros(n_nodes)
        for i in range(n):
            nd = node[i]
            if nd >= 0:
                cnt[nd] += 1
                tot[nd] += resid[i]
        cl = np.zeros(n_nodes, dtype=np.int64)
        sl = np.zeros(n_nodes)
        last = np.zeros(n_nodes)
        for j in range(k):
            cl[:] = 0
            sl[:] = 0.0
            for t in range(n):
                i = order[t, j]
                nd = node[i]
                if nd < 0:
                    continue
                v = X[i, j]
                nl = cl[nd]
                if nl > 0 and v > last[nd]:
                    nr = cnt[nd] - nl
                    if nl >= min_leaf and nr >= min_leaf:
                        a = sl[nd]
                        bsum = tot[nd] - a
                        gain = (a * a / nl + bsum * bsum / nr
                                - tot[nd] * tot[nd] / cnt[nd])
                        if gain > best[nd]:
                            best[nd] = gain
                            feat[nd] = j
                            mid = 0.5 * (last[nd] + v)
                            thr[nd] = last[nd] if mid >= v else mid
                cl[nd] = nl + 1
                sl[nd] += resid[i]
                last[nd] = v
        return feat, thr, best

    @njit(cache=True, nogil=True)
    def _nb_tree_apply(X, feature, threshold, value, depth):
        n = X.shape[0]
        out = np.empty(n)
        for i in range(n):
            idx = 0
            for _ in range(depth):
                f = feature[idx]
                if f < 0:
                    break
                if X[i, f] <= threshold[idx]:
                    idx = 2 * idx + 1
                else:
                    idx = 2 * idx + 2
            out[i] = value[idx]
        return out

    NUMBA_KERNELS = SimpleNamespace(
        name="numba",
        centered_weighted_sum=_nb_centered_weighted_sum,
        subset_lstsq=_nb_subset_lstsq,
        level_splits=_nb_level_splits,
        tree_apply=_nb_tree_apply,
    )


ACTIVE = NUMBA_KERNELS if USE_NUMBA else NUMPY_KERNELS

centered_weighted_sum = ACTIVE.centered_weighted_sum
subset_lstsq = ACTIVE.subset_lstsq
level_splits = ACTIVE.level_splits
tree_apply = ACTIVE.tree_apply
