"""Numeric engines behind the combiners.

OLS with inference and AIC, the all-subset OLS sweep, least squares on the
probability simplex, quantile (median) regression, and least-squares tree
boosting.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, sparse, stats
from scipy.linalg import solve_triangular

from . import kernels
from .exceptions import ConvergenceError, InvalidInputError, RankDeficientError, SolverError

log = logging.getLogger(__name__)

RANK_TOL = 1e-10


def _design(X, y=None):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2:
        raise InvalidInputError(f"X must be 2-D, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise InvalidInputError("X contains non-finite values")
    if y is None:
        return X
    y = np.asarray(y, dtype=np.float64).ravel()
    if y.shape[0] != X.shape[0]:
        raise InvalidInputError(f"X has {X.shape[0]} rows but y has {y.shape[0]}")
    if not np.all(np.isfinite(y)):
        raise InvalidInputError("y contains non-finite values")
    return X, y


def _with_intercept(X):
    return np.column_stack([np.ones(X.shape[0]), X])


def gram(A):
    """``A.T @ A`` without BLAS, so results do not depend on BLAS threading."""
    return np.einsum("ij,ik->jk", A, A)


# ---------------------------------------------------------------------------
# ordinary least squares
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class OlsFit:
    coef: np.ndarray
    intercept: float
    coef_se: np.ndarray
    intercept_se: float
    p_values: np.ndarray
    intercept_p: float
    rss: float
    n: int
    k: int
    has_intercept: bool

    @property
    def aic(self) -> float:
        return aic(self)

    def predict(self, X):
        X = _design(X)
        return self.intercept + X @ self.coef


def ols_fit(X, y, intercept=True) -> OlsFit:
    """Least squares via Householder QR, with t-based inference.

    ``k`` counts fitted coefficients including the intercept. Rank
    deficiency is declared when ``|R_jj| <= 1e-10 * ||X||_F``.
    """
    X, y = _design(X, y)
    A = _with_intercept(X) if intercept else X
    n, k = A.shape
    if n <= k:
        raise RankDeficientError(f"need more rows than coefficients (n={n}, k={k})")
    q, r = np.linalg.qr(A)
    tol = RANK_TOL * np.linalg.norm(A)
    diag = np.abs(np.diag(r))
    if np.any(diag <= tol):
        bad = int(np.argmin(diag))
        raise RankDeficientError(f"design is rank deficient (column {bad}, |R_jj|={diag[bad]:.3g})")
    beta = solve_triangular(r, q.T @ y)
    resid = y - A @ beta
    rss = float(resid @ resid)
    df = n - k
    sigma2 = rss / df
    rinv = solve_triangular(r, np.eye(k))
    se = np.sqrt(sigma2 * np.einsum("ij,ij->i", rinv, rinv))
    with np.errstate(divide="ignore", invalid="ignore"):
        tstat = np.where(se > 0, beta / se, np.where(beta == 0, 0.0, np.inf))
    pv = 2.0 * stats.t.sf(np.abs(tstat), df)
    if intercept:
        return OlsFit(beta[1:], float(beta[0]), se[1:], float(se[0]), pv[1:], float(pv[0]),
                      rss, n, k, True)
    return OlsFit(beta, 0.0, se, 0.0, pv, float("nan"), rss, n, k, False)


def aic(fit) -> float:
    """``n ln(rss / n) + 2 (k + 1)``; the +1 counts the error variance.

    A perfect fit (rss = 0) returns ``-inf`` so it ranks best.
    """
    if fit.rss <= 0:
        return -math.inf
    return fit.n * math.log(fit.rss / fit.n) + 2.0 * (fit.k + 1)


def aic_from_rss(rss, n, k):
    rss = np.asarray(rss, dtype=np.float64)
    with np.errstate(divide="ignore"):
        out = n * np.log(rss / n) + 2.0 * (np.asarray(k) + 1)
    return np.where(rss > 0, out, -np.inf)


@dataclass(frozen=True, eq=False)
class SubsetSweep:
    """OLS fits (intercept always included) for every column subset.

    Row ``s`` of ``coefs`` holds ``[intercept, coef_1..coef_K]`` for the
    subset with bitmask ``masks[s]`` (bit j set <=> column j used); absent
    columns are 0. ``ok`` is False for rank-deficient subsets.
    """

    masks: np.ndarray
    coefs: np.ndarray
    rss: np.ndarray
    ok: np.ndarray
    n: int

    @property
    def sizes(self):
        return popcount(self.masks) + 1

    def aic(self):
        return aic_from_rss(self.rss, self.n, self.sizes)


def popcount(masks):
    masks = np.asarray(masks, dtype=np.int64)
    out = np.zeros(masks.shape, dtype=np.int64)
    m = masks.copy()
    while np.any(m):
        out += m & 1
        m >>= 1
    return out


def subset_sweep(X, y, masks=None, n_threads=1, kern=None) -> SubsetSweep:
    """Fit OLS on every subset of the columns of ``X`` in one pass.

    The full design is QR-factored once; each subset problem then reduces to
    a (K+1)-row least-squares problem on the columns of ``R``. Subsets are
    processed in fixed chunks (bitmask ascending) so results do not depend
    on ``n_threads``.
    """
    kern = kern or kernels.ACTIVE
    X, y = _design(X, y)
    n, K = X.shape
    A = _with_intercept(X)
    if n <= K + 1:
        raise RankDeficientError(f"need n > K + 1 rows for the subset sweep (n={n}, K={K})")
    if masks is None:
        masks = np.arange(2 ** K, dtype=np.int64)
    masks = np.ascontiguousarray(masks, dtype=np.int64)
    q, R = np.linalg.qr(A)
    c = q.T @ y
    base = y - q @ c
    rss0 = float(base @ base)
    tol = RANK_TOL * float(np.linalg.norm(A))
    R = np.ascontiguousarray(R)
    chunk = 256
    starts = list(range(0, masks.size, chunk))

    def run(s):
        return kern.subset_lstsq(R, c, masks[s:s + chunk], tol)

    if n_threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as ex:
            parts = list(ex.map(run, starts))
    else:
        parts = [run(s) for s in starts]
    coefs = np.concatenate([p[0] for p in parts]) if parts else np.zeros((0, K + 1))
    rss = np.concatenate([p[1] for p in parts]) + rss0 if parts else np.zeros(0)
    ok = np.concatenate([p[2] for p in parts]) if parts else np.zeros(0, bool)
    rss = np.where(ok, rss, np.nan)
    return SubsetSweep(masks, coefs, rss, ok, n)


# ---------------------------------------------------------------------------
# least squares on the probability simplex
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SimplexFit:
    weights: np.ndarray
    objective: float
    kkt_residual: float
    iterations: int


def project_simplex(v):
    """Euclidean projection onto {w >= 0, sum w = 1} (sort-based)."""
    v = np.asarray(v, dtype=np.float64)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    ind = np.arange(1, v.size + 1)
    rho = np.nonzero(u - css / ind > 0)[0][-1]
    theta = css[rho] / (rho + 1.0)
    return np.maximum(v - theta, 0.0)


def _reduce(X, y):
    # ||y - Xw||^2 = ||c - R w||^2 + rss0 with X = QR.
    q, R = np.linalg.qr(X)
    c = q.T @ y
    resid = y - q @ c
    return R, c, float(resid @ resid)


def simplex_kkt_residual(R, c, w):
    """Fixed-point residual ``||w - P(w - grad / L)||_inf`` with ``L = ||R||_2^2``."""
    g = R.T @ (R @ w - c)
    L = np.linalg.norm(R, 2) ** 2
    if L == 0:
        return 0.0
    return float(np.max(np.abs(w - project_simplex(w - g / L))))


def _equality_ls(R, c, support):
    # min ||c - R_S w||  s.t. sum w = 1, via null-space of the constraint.
    RS = R[:, support]
    m = len(support)
    if m == 1:
        return np.ones(1)
    w0 = np.full(m, 1.0 / m)
    N = np.zeros((m, m - 1))
    N[0, :] = -1.0
    N[1:, :] = np.eye(m - 1)
    z, *_ = np.linalg.lstsq(RS @ N, c - RS @ w0, rcond=None)
    return w0 + N @ z


def simplex_ls(X, y, max_iter=5000, tol=1e-12) -> SimplexFit:
    """Minimise ``||y - X w||^2`` over the probability simplex.

    Accelerated projected gradient gives a warm start; an active-set polish
    then solves the equality-constrained problem on the support exactly,
    dropping negative weights and adding the most violated inactive column
    until the KKT conditions hold.
    """
    X, y = _design(X, y)
    n, K = X.shape
    if K == 1:
        w = np.ones(1)
        r = y - X[:, 0]
        return SimplexFit(w, float(r @ r), 0.0, 0)
    R, c, rss0 = _reduce(X, y)
    L = np.linalg.norm(R, 2) ** 2
    w = np.full(K, 1.0 / K)
    if L > 0:
        z, t = w.copy(), 1.0
        for it in range(max_iter):
            g = R.T @ (R @ z - c)
            w_new = project_simplex(z - g / L)
            t_new = 0.5 * (1 + math.sqrt(1 + 4 * t * t))
            z = w_new + ((t - 1) / t_new) * (w_new - w)
            if np.max(np.abs(w_new - w)) <= tol:
                w = w_new
                break
            w, t = w_new, t_new
    else:
        it = 0
    w, polish_iters = _active_set_polish(R, c, w)
    r = c - R @ w
    return SimplexFit(w, float(r @ r) + rss0, simplex_kkt_residual(R, c, w), it + polish_iters)


def _active_set_polish(R, c, w, max_iter=500):
    K = w.size
    w = w.copy()
    support = np.flatnonzero(w > 0).tolist()
    it = 0
    while it < max_iter:
        it += 1
        ws = _equality_ls(R, c, support)
        if np.any(ws < 0):
            # Move towards ws until the first weight reaches zero, then drop it.
            cur = w[support]
            neg = ws < 0
            alpha = min(1.0, float(np.min(cur[neg] / (cur[neg] - ws[neg]))))
            new = cur + alpha * (ws - cur)
            hit = int(np.flatnonzero(neg)[np.argmin(cur[neg] / (cur[neg] - ws[neg]))])
            new[hit] = 0.0
            new = np.maximum(new, 0.0)
            w = np.zeros(K)
            w[support] = new
            support = [s for s, v in zip(support, new) if v > 0]
            w /= w.sum()
            continue
        w = np.zeros(K)
        w[support] = ws
        g = R.T @ (R @ w - c)
        nu = -float(np.mean(g[support]))
        outside = [j for j in range(K) if j not in support]
        if not outside:
            break
        viol = g[outside] + nu
        j = int(np.argmin(viol))
        if viol[j] >= -1e-13 * max(1.0, float(np.max(np.abs(g)))):
            break
        support = sorted(support + [outside[j]])
    return w, it


# ---------------------------------------------------------------------------
# quantile regression
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class QuantileFit:
    tau: float
    intercept: float
    coef: np.ndarray
    objective: float
    method: str
    iterations: int = 0

    def predict(self, X):
        return self.intercept + _design(X) @ self.coef


def check_loss(u, tau):
    u = np.asarray(u, dtype=np.float64)
    return float(np.sum(u * (tau - (u < 0))))


def quantile_fit(X, y, tau=0.5, method="lp", max_iter=500, tol=1e-8) -> QuantileFit:
    """Linear quantile regression with intercept.

    ``method="lp"`` solves the exact linear program (HiGHS dual simplex);
    ``method="irls"`` runs epsilon-smoothed iteratively reweighted least
    squares and falls back to the LP when it stalls. With no columns the
    fit is the lower empirical tau-quantile (order statistic ceil(tau n)).
    """
    if not 0 < tau < 1:
        raise InvalidInputError(f"tau must lie in (0, 1), got {tau}")
    X, y = _design(X, y)
    n, K = X.shape
    if K == 0:
        srt = np.sort(y)
        b0 = float(srt[max(int(math.ceil(tau * n)) - 1, 0)])
        return QuantileFit(tau, b0, np.zeros(0), check_loss(y - b0, tau), "order-statistic")
    if method == "irls":
        try:
            return _quantile_irls(X, y, tau, max_iter, tol)
        except ConvergenceError as err:
            log.info("IRLS quantile fit stalled (%s); using LP", err)
    elif method != "lp":
        raise InvalidInputError(f"unknown quantile method {method!r}")
    return _quantile_lp(X, y, tau)


def _quantile_lp(X, y, tau):
    n, K = X.shape
    A = _with_intercept(X)
    # Column scaling keeps the LP well conditioned; undone afterwards.
    scale = np.maximum(np.max(np.abs(A), axis=0), 1e-300)
    As = A / scale
    p = K + 1
    cost = np.concatenate([np.zeros(p), np.full(n, tau), np.full(n, 1.0 - tau)])
    eye = sparse.identity(n, format="csr")
    A_eq = sparse.hstack([sparse.csr_matrix(As), eye, -eye], format="csr")
    bounds = [(None, None)] * p + [(0, None)] * (2 * n)
    res = optimize.linprog(cost, A_eq=A_eq, b_eq=y, bounds=bounds, method="highs-ds")
    if res.status != 0:
        raise SolverError(f"quantile LP failed: {res.message}")
    beta = res.x[:p] / scale
    obj = check_loss(y - A @ beta, tau)
    return QuantileFit(tau, float(beta[0]), beta[1:], obj, "lp", int(res.nit))


def _quantile_irls(X, y, tau, max_iter, tol, eps=1e-8):
    A = _with_intercept(X)
    beta, *_ = np.linalg.lstsq(A, y, rcond=None)
    obj = check_loss(y - A @ beta, tau)
    for it in range(1, max_iter + 1):
        r = y - A @ beta
        w = np.where(r >= 0, tau, 1.0 - tau) / np.maximum(np.abs(r), eps)
        sw = np.sqrt(w)
        beta, *_ = np.linalg.lstsq(A * sw[:, None], y * sw, rcond=None)
        new = check_loss(y - A @ beta, tau)
        if abs(obj - new) <= tol * max(1.0, abs(obj)):
            return QuantileFit(tau, float(beta[0]), beta[1:], new, "irls", it)
        obj = new
    raise ConvergenceError(f"IRLS did not converge in {max_iter} iterations", obj)


# ---------------------------------------------------------------------------
# least-squares gradient boosting
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class RegressionTree:
    """Heap-ordered tree: node i has children 2i+1, 2i+2; ``feature < 0`` is a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    value: np.ndarray
    depth: int

    def predict(self, X, kern=None):
        kern = kern or kernels.ACTIVE
        return kern.tree_apply(np.ascontiguousarray(X, dtype=np.float64), self.feature,
                               self.threshold, self.value, self.depth)

    def to_dict(self):
        used = np.flatnonzero((self.feature >= 0) | (self.value != 0))
        return {
            "depth": self.depth,
            "nodes": [[int(i), int(self.feature[i]), float(self.threshold[i]), float(self.value[i])]
                      for i in used],
        }

    @classmethod
    def from_dict(cls, d):
        depth = int(d["depth"])
        size = 2 ** (depth + 1) - 1
        feature = np.full(size, -1, dtype=np.int64)
        threshold = np.zeros(size)
        value = np.zeros(size)
        for i, f, t, v in d["nodes"]:
            feature[i], threshold[i], value[i] = f, t, v
        return cls(feature, threshold, value, depth)


@dataclass(frozen=True, eq=False)
class BoostedModel:
    trees: list
    learning_rate: float
    base_score: float
    max_depth: int
    train_mse: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def n_trees(self):
        return len(self.trees)

    def predict(self, X, kern=None):
        X = np.ascontiguousarray(_design(X))
        out = np.full(X.shape[0], self.base_score)
        for tree in self.trees:
            out += self.learning_rate * tree.predict(X, kern)
        return out

    def to_dict(self):
        return {
            "learning_rate": self.learning_rate,
            "base_score": self.base_score,
            "max_depth": self.max_depth,
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d):
        return cls([RegressionTree.from_dict(t) for t in d["trees"]], float(d["learning_rate"]),
                   float(d["base_score"]), int(d["max_depth"]))


def _grow_tree(X, order, resid, depth, min_leaf, kern):
    n = X.shape[0]
    size = 2 ** (depth + 1) - 1
    feature = np.full(size, -1, dtype=np.int64)
    threshold = np.zeros(size)
    value = np.zeros(size)
    heap = np.zeros(n, dtype=np.int64)  # heap id of each row's current node
    open_ids = [0]
    for level in range(depth):
        if not open_ids:
            break
        local = np.full(size, -1, dtype=np.int64)
        local[open_ids] = np.arange(len(open_ids))
        node = local[heap]
        act = node >= 0
        sq = np.bincount(node[act], weights=resid[act] ** 2, minlength=len(open_ids))
        min_gain = 1e-12 * sq
        feat, thr, _ = kern.level_splits(X, order, resid, node, len(open_ids), min_leaf, min_gain)
        next_open = []
        for li, hid in enumerate(open_ids):
            if feat[li] < 0:
                continue
            feature[hid], threshold[hid] = feat[li], thr[li]
            rows = node == li
            left = X[rows, feat[li]] <= thr[li]
            ids = np.where(left, 2 * hid + 1, 2 * hid + 2)
            heap[rows] = ids
            next_open += [2 * hid + 1, 2 * hid + 2]
        open_ids = next_open
    cnt = np.bincount(heap, minlength=size)
    sums = np.bincount(heap, weights=resid, minlength=size)
    leaves = cnt > 0
    value[leaves] = sums[leaves] / cnt[leaves]
    return RegressionTree(feature, threshold, value, depth)


def boost_fit(X, y, n_trees=200, depth=3, learning_rate=0.1, seed=0, min_samples_leaf=1,
              kern=None) -> BoostedModel:
    """Stagewise least-squares boosting of depth-limited regression trees.

    Starts from ``mean(y)``; every round fits a tree to the current
    residuals by exact greedy split search and adds ``learning_rate`` times
    its leaf means. No subsampling, so ``seed`` only labels the run.
    Training MSE is recorded per round and is nonincreasing.
    """
    if n_trees < 1:
        raise InvalidInputError("n_trees must be >= 1")
    if depth < 1:
        raise InvalidInputError("depth must be >= 1")
    if not 0 < learning_rate <= 1:
        raise InvalidInputError("learning_rate must lie in (0, 1]")
    kern = kern or kernels.ACTIVE
    X, y = _design(X, y)
    X = np.ascontiguousarray(X)
    order = np.ascontiguousarray(np.argsort(X, axis=0, kind="stable"))
    base = float(np.mean(y))
    pred = np.full(y.size, base)
    trees = []
    history = [float(np.mean((y - pred) ** 2))]
    for _ in range(n_trees):
        resid = y - pred
        tree = _grow_tree(X, order, resid, depth, min_samples_leaf, kern)
        if not np.any(tree.feature >= 0):
            break  # no admissible split: later rounds cannot change anything
        trees.append(tree)
        pred = pred + learning_rate * tree.predict(X, kern)
        history.append(float(np.mean((y - pred) ** 2)))
    return BoostedModel(trees, float(learning_rate), base, depth, np.asarray(history))
