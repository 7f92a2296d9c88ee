"""Ten ways to combine candidate claim-cost predictions.

Every method goes through :func:`fit` and returns an immutable
:class:`CombinerModel`, whose ``predict`` maps a prediction matrix (rows =
policies, columns = forecasters) to one combined prediction.

Method tags
-----------
``SA``      simple average of all columns.
``SA-EX``   simple average with some columns excluded (default: the column
            with the largest Gini on the training rows).
``LR-AIC``  OLS on the minimum-AIC column subset (all 2^K subsets searched).
``LR-D``    OLS on the columns significant in the full fit.
``LR-C``    least squares with weights on the probability simplex.
``QR``      median regression.
``GB``      least-squares gradient boosting on the prediction columns.
``ARM-A``   adaptive regression by mixing over the raw columns.
``SA-S``    uniform average of the 2^K subset-OLS predictions.
``ARM-I``   adaptive regression by mixing over the 2^K subset-OLS fits.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy.special import logsumexp

from . import metrics, solvers
from .exceptions import InvalidInputError, SolverError

log = logging.getLogger(__name__)

METHODS = ("SA", "SA-EX", "LR-AIC", "LR-D", "LR-C", "QR", "GB", "ARM-A", "SA-S", "ARM-I")
LINEAR_METHODS = ("SA", "SA-EX", "LR-AIC", "LR-D", "LR-C", "QR", "ARM-A")
SUBSET_METHODS = ("SA-S", "ARM-I")
SIMPLEX_METHODS = ("SA", "SA-EX", "LR-C", "ARM-A", "SA-S", "ARM-I")
SPARSE_WEIGHT_CUTOFF = 1e-12


@dataclass(frozen=True)
class ArmConfig:
    n_splits: int = 50
    split_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.n_splits < 1:
            raise InvalidInputError("n_splits must be >= 1")
        if not 0 < self.split_fraction < 1:
            raise InvalidInputError("split_fraction must lie in (0, 1)")


@dataclass(frozen=True, eq=False)
class CombinerModel:
    """A fitted combiner. Exactly one payload is set, matching ``method``:

    * linear methods: ``weights`` (length K) and ``intercept``;
    * subset methods: ``subset_masks``, ``subset_coefs`` (rows of
      ``[intercept, coef_1..coef_K]``) and ``subset_weights``;
    * ``GB``: ``booster``.
    """

    method: str
    columns: tuple
    weights: np.ndarray | None = None
    intercept: float = 0.0
    subset_masks: np.ndarray | None = None
    subset_coefs: np.ndarray | None = None
    subset_weights: np.ndarray | None = None
    booster: solvers.BoostedModel | None = None
    options: dict = field(default_factory=dict)
    seed: int | None = None
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in METHODS:
            raise InvalidInputError(f"unknown method {self.method!r}")
        payloads = [self.weights is not None, self.subset_weights is not None,
                    self.booster is not None]
        if sum(payloads) != 1:
            raise InvalidInputError("CombinerModel needs exactly one payload")
        expected = (0 if self.method in LINEAR_METHODS else
                    1 if self.method in SUBSET_METHODS else 2)
        if not payloads[expected]:
            raise InvalidInputError(f"payload does not match method {self.method}")

    @property
    def n_columns(self):
        return len(self.columns)

    def effective_coefficients(self):
        """``[intercept, coef_1..coef_K]`` of the equivalent linear predictor
        (linear and subset methods only)."""
        if self.weights is not None:
            return np.concatenate([[self.intercept], self.weights])
        if self.subset_weights is not None:
            return self.subset_weights @ self.subset_coefs
        raise InvalidInputError("GB has no linear representation")

    def subset_predictions(self, preds):
        """Matrix of the stored subset-OLS predictions, one column per subset."""
        P = _check_matrix(preds, self.columns)
        return self.subset_coefs[:, 0] + P @ self.subset_coefs[:, 1:].T

    def predict(self, preds, columns=None):
        P = _check_matrix(preds, self.columns, columns)
        if self.weights is not None:
            return self.intercept + P @ self.weights
        if self.subset_weights is not None:
            beta = self.effective_coefficients()
            return beta[0] + P @ beta[1:]
        return self.booster.predict(P)

    def to_dict(self):
        d = {
            "method": self.method,
            "columns": list(self.columns),
            "options": _jsonable(self.options),
            "seed": self.seed,
            "diagnostics": _jsonable(self.diagnostics),
        }
        if self.weights is not None:
            d["intercept"] = float(self.intercept)
            d["weights"] = [float(w) for w in self.weights]
        elif self.subset_weights is not None:
            d["subsets"] = [
                {"mask": int(m), "weight": float(w), "coef": [float(c) for c in row]}
                for m, w, row in zip(self.subset_masks, self.subset_weights, self.subset_coefs)
            ]
        else:
            d["booster"] = self.booster.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        common = dict(method=d["method"], columns=tuple(d["columns"]),
                      options=d.get("options", {}), seed=d.get("seed"),
                      diagnostics=d.get("diagnostics", {}))
        if "weights" in d:
            return cls(weights=np.asarray(d["weights"], dtype=np.float64),
                       intercept=float(d.get("intercept", 0.0)), **common)
        if "subsets" in d:
            subs = d["subsets"]
            return cls(subset_masks=np.asarray([s["mask"] for s in subs], dtype=np.int64),
                       subset_weights=np.asarray([s["weight"] for s in subs], dtype=np.float64),
                       subset_coefs=np.asarray([s["coef"] for s in subs], dtype=np.float64),
                       **common)
        return cls(booster=solvers.BoostedModel.from_dict(d["booster"]), **common)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    return obj


def _check_matrix(preds, fitted_columns, columns=None):
    P = np.asarray(preds, dtype=np.float64)
    if P.ndim == 1:
        P = P[:, None]
    if P.ndim != 2 or P.shape[1] != len(fitted_columns):
        raise InvalidInputError(
            f"expected {len(fitted_columns)} prediction columns, got shape {P.shape}")
    if columns is not None and tuple(columns) != tuple(fitted_columns):
        raise InvalidInputError(f"column mismatch: fitted on {list(fitted_columns)}, got {list(columns)}")
    if not np.all(np.isfinite(P)):
        raise InvalidInputError("prediction matrix has non-finite entries")
    return P


def _inputs(preds, y, columns):
    P = np.asarray(preds, dtype=np.float64)
    if P.ndim == 1:
        P = P[:, None]
    y = np.asarray(y, dtype=np.float64).ravel()
    if P.ndim != 2 or P.shape[1] < 1:
        raise InvalidInputError("prediction matrix must be n x K with K >= 1")
    if P.shape[0] != y.size:
        raise InvalidInputError(f"{P.shape[0]} prediction rows but {y.size} responses")
    if not (np.all(np.isfinite(P)) and np.all(np.isfinite(y))):
        raise InvalidInputError("non-finite values in predictions or responses")
    if columns is None:
        columns = tuple(f"A{j + 1}" for j in range(P.shape[1]))
    columns = tuple(str(c) for c in columns)
    if len(columns) != P.shape[1]:
        raise InvalidInputError("columns must name every prediction column")
    return P, y, columns


# ---------------------------------------------------------------------------
# linear combiners
# ---------------------------------------------------------------------------


def fit_sa(preds, y=None, columns=None, exclude=()):
    P = np.asarray(preds, dtype=np.float64)
    P, _, columns = _inputs(P, np.zeros(P.shape[0]) if y is None else y, columns)
    K = P.shape[1]
    idx = _resolve_columns(exclude, columns)
    keep = [j for j in range(K) if j not in idx]
    if not keep:
        raise InvalidInputError("cannot exclude every column")
    w = np.zeros(K)
    w[keep] = 1.0 / len(keep)
    method = "SA-EX" if idx else "SA"
    opts = {"exclude": [columns[j] for j in sorted(idx)]} if idx else {}
    return CombinerModel(method, columns, weights=w, options=opts)


def _resolve_columns(names, columns):
    out = set()
    for c in names or ():
        if isinstance(c, (int, np.integer)):
            if not 0 <= c < len(columns):
                raise InvalidInputError(f"column index {c} out of range")
            out.add(int(c))
        elif c in columns:
            out.add(columns.index(c))
        else:
            raise InvalidInputError(f"unknown column {c!r}")
    return out


def fit_sa_ex(preds, y, columns=None, exclude=None):
    """Simple average without ``exclude``; by default drops the column whose
    Gini on ``y`` is largest (the dominant candidate)."""
    P, y, columns = _inputs(preds, y, columns)
    diag = {}
    if exclude is None:
        g = [metrics.gini(y, P[:, j]) for j in range(P.shape[1])]
        exclude = [columns[int(np.argmax(g))]]
        diag["gini"] = g
    model = fit_sa(P, y, columns, exclude=exclude)
    if model.method != "SA-EX":
        raise InvalidInputError("SA-EX needs at least one excluded column")
    return _replace(model, diagnostics=diag)


def _replace(model, **kw):
    d = dict(method=model.method, columns=model.columns, weights=model.weights,
             intercept=model.intercept, subset_masks=model.subset_masks,
             subset_coefs=model.subset_coefs, subset_weights=model.subset_weights,
             booster=model.booster, options=model.options, seed=model.seed,
             diagnostics=model.diagnostics)
    d.update(kw)
    return CombinerModel(**d)


def fit_lr_d(preds, y, columns=None, alpha=0.05):
    """Full OLS, keep the columns with p < alpha, refit; intercept always kept.

    No significant column leaves the intercept-only model.
    """
    P, y, columns = _inputs(preds, y, columns)
    full = solvers.ols_fit(P, y)
    keep = np.flatnonzero(full.p_values < alpha)
    w = np.zeros(P.shape[1])
    if keep.size:
        sub = solvers.ols_fit(P[:, keep], y)
        w[keep] = sub.coef
        b0 = sub.intercept
    else:
        b0 = float(np.mean(y))
    diag = {"selected": [columns[j] for j in keep], "full_p_values": full.p_values}
    return CombinerModel("LR-D", columns, weights=w, intercept=b0,
                         options={"alpha": alpha}, diagnostics=diag)


def _select_min_aic(sweep):
    aic = sweep.aic()
    ok = sweep.ok
    if not np.any(ok):
        raise SolverError("every subset is rank deficient")
    best = min(np.flatnonzero(ok),
               key=lambda s: (aic[s], int(sweep.sizes[s]), int(sweep.masks[s])))
    return int(best), aic


def fit_lr_aic(preds, y, columns=None, n_threads=1):
    """Exhaustive AIC search over all 2^K column subsets (intercept always in).

    Ties go to the smaller subset, then the lower bitmask. Rank-deficient
    subsets are skipped and counted.
    """
    P, y, columns = _inputs(preds, y, columns)
    sweep = solvers.subset_sweep(P, y, n_threads=n_threads)
    s, aic = _select_min_aic(sweep)
    n_skipped = int(np.count_nonzero(~sweep.ok))
    if n_skipped:
        log.info("LR-AIC: skipped %d rank-deficient subsets", n_skipped)
    coef = sweep.coefs[s]
    mask = int(sweep.masks[s])
    diag = {"mask": mask, "selected": [columns[j] for j in range(len(columns)) if mask >> j & 1],
            "aic": float(aic[s]), "n_fits": int(sweep.masks.size), "n_skipped": n_skipped}
    return CombinerModel("LR-AIC", columns, weights=coef[1:].copy(), intercept=float(coef[0]),
                         diagnostics=diag)


def fit_lr_c(preds, y, columns=None):
    """Least squares with nonnegative weights summing to one, no intercept."""
    P, y, columns = _inputs(preds, y, columns)
    res = solvers.simplex_ls(P, y)
    return CombinerModel("LR-C", columns, weights=res.weights,
                         diagnostics={"kkt_residual": res.kkt_residual,
                                      "objective": res.objective})


def fit_qr_combiner(preds, y, columns=None, tau=0.5, method="lp"):
    P, y, columns = _inputs(preds, y, columns)
    res = solvers.quantile_fit(P, y, tau=tau, method=method)
    return CombinerModel("QR", columns, weights=np.asarray(res.coef), intercept=res.intercept,
                         options={"tau": tau, "method": res.method},
                         diagnostics={"objective": res.objective})


def fit_gb_combiner(preds, y, columns=None, n_trees=200, depth=3, learning_rate=0.1,
                    seed=0, min_samples_leaf=1):
    """The boosted ensemble itself is the combined prediction."""
    P, y, columns = _inputs(preds, y, columns)
    booster = solvers.boost_fit(P, y, n_trees=n_trees, depth=depth, learning_rate=learning_rate,
                                seed=seed, min_samples_leaf=min_samples_leaf)
    opts = {"n_trees": n_trees, "depth": depth, "learning_rate": learning_rate,
            "min_samples_leaf": min_samples_leaf}
    return CombinerModel("GB", columns, booster=booster, options=opts, seed=seed,
                         diagnostics={"final_train_mse": float(booster.train_mse[-1]),
                                      "trees_built": booster.n_trees})


# ---------------------------------------------------------------------------
# adaptive regression by mixing
# ---------------------------------------------------------------------------


def arm_split_log_weights(sigma2, sse2, n2, ok=None):
    """Normalised log-weights of one ARM split.

    ``log w_j = -n2 log(sigma_j) - sse2_j / (2 sigma_j^2)`` normalised with
    log-sum-exp. Candidates with ``sigma2 == 0`` take all the weight
    (shared equally); ``ok == False`` candidates get ``-inf``.
    """
    sigma2 = np.asarray(sigma2, dtype=np.float64)
    sse2 = np.asarray(sse2, dtype=np.float64)
    ok = np.ones(sigma2.shape, bool) if ok is None else np.asarray(ok, bool)
    perfect = ok & (sigma2 <= 0)
    if np.any(perfect):
        out = np.full(sigma2.shape, -np.inf)
        out[perfect] = -math.log(np.count_nonzero(perfect))
        return out
    lw = np.full(sigma2.shape, -np.inf)
    s2 = sigma2[ok]
    lw[ok] = -0.5 * n2 * np.log(s2) - sse2[ok] / (2.0 * s2)
    return lw - logsumexp(lw)


def _arm_halves(n, cfg):
    n1 = int(round(cfg.split_fraction * n))
    n1 = min(max(n1, 2), n - 2)
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(7,)))
    for _ in range(cfg.n_splits):
        perm = rng.permutation(n)
        yield np.sort(perm[:n1]), np.sort(perm[n1:])


def _arm_average(log_weights):
    W = np.exp(np.asarray(log_weights))
    w = W.mean(axis=0)
    return w / w.sum()


def _sparsify(w):
    w = np.where(w > SPARSE_WEIGHT_CUTOFF, w, 0.0)
    return w / w.sum()


def fit_arm(preds, y, columns=None, config=None):
    """ARM-A: mixing weights over the raw prediction columns.

    Each split estimates a candidate's error variance on the first part and
    scores its squared error on the second; weights are averaged over
    splits.
    """
    cfg = config or ArmConfig()
    P, y, columns = _inputs(preds, y, columns)
    n = y.size
    if n < 4:
        raise InvalidInputError("ARM needs at least 4 rows")
    logs = []
    for d1, d2 in _arm_halves(n, cfg):
        r1 = y[d1, None] - P[d1]
        r2 = y[d2, None] - P[d2]
        sigma2 = np.mean(r1 * r1, axis=0)
        sigma2 = np.where(sigma2 <= _perfect_tol(y[d1]), 0.0, sigma2)
        logs.append(arm_split_log_weights(sigma2, np.sum(r2 * r2, axis=0), d2.size))
    w = _arm_average(logs)
    return CombinerModel("ARM-A", columns, weights=w, seed=cfg.seed,
                         options={"n_splits": cfg.n_splits, "split_fraction": cfg.split_fraction},
                         diagnostics={"split_log_weights": np.asarray(logs)})


def _perfect_tol(y):
    return 1e-24 * float(np.mean(y * y)) if y.size else 0.0


def _subset_sse(coefs, X2, y2):
    # sum_i (y_i - [1, x_i] b)^2 for every row b of coefs, via the Gram matrix.
    A = np.column_stack([np.ones(X2.shape[0]), X2])
    G = solvers.gram(A)
    h = A.T @ y2
    yy = float(y2 @ y2)
    quad = np.einsum("sj,jk,sk->s", coefs, G, coefs)
    return np.maximum(yy - 2.0 * coefs @ h + quad, 0.0)


def fit_arm_i(preds, y, columns=None, config=None, n_threads=1):
    """ARM-I: mixing over the 2^K subset-OLS candidates.

    Candidates are refit on the first part of each split; the final subset
    fits use all rows.
    """
    cfg = config or ArmConfig()
    P, y, columns = _inputs(preds, y, columns)
    n, K = P.shape
    if n < 4:
        raise InvalidInputError("ARM needs at least 4 rows")
    full = solvers.subset_sweep(P, y, n_threads=n_threads)
    logs = []
    for d1, d2 in _arm_halves(n, cfg):
        sw = solvers.subset_sweep(P[d1], y[d1], n_threads=n_threads)
        ok = sw.ok & full.ok
        sigma2 = np.where(ok, sw.rss, 1.0) / d1.size
        sigma2 = np.where(ok & (sigma2 <= _perfect_tol(y[d1])), 0.0, sigma2)
        sse2 = _subset_sse(np.where(ok[:, None], sw.coefs, 0.0), P[d2], y[d2])
        logs.append(arm_split_log_weights(sigma2, sse2, d2.size, ok))
    w = _sparsify(_arm_average(logs))
    keep = np.flatnonzero(w > 0)
    top = int(full.masks[keep[np.argmax(w[keep])]])
    diag = {"n_candidates": int(full.masks.size), "n_nonzero": int(keep.size),
            "top_mask": top, "top_weight": float(w.max())}
    return CombinerModel("ARM-I", columns, subset_masks=full.masks[keep],
                         subset_coefs=full.coefs[keep], subset_weights=w[keep], seed=cfg.seed,
                         options={"n_splits": cfg.n_splits, "split_fraction": cfg.split_fraction},
                         diagnostics=diag)


def fit_sa_s(preds, y, columns=None, n_threads=1):
    """Uniform average of the OLS predictions of every column subset."""
    P, y, columns = _inputs(preds, y, columns)
    sweep = solvers.subset_sweep(P, y, n_threads=n_threads)
    keep = np.flatnonzero(sweep.ok)
    if keep.size == 0:
        raise SolverError("every subset is rank deficient")
    weight = Fraction(1, int(keep.size))
    w = np.full(keep.size, float(weight))
    return CombinerModel("SA-S", columns, subset_masks=sweep.masks[keep],
                         subset_coefs=sweep.coefs[keep], subset_weights=w,
                         diagnostics={"n_subsets": int(keep.size),
                                      "n_skipped": int(sweep.masks.size - keep.size)})


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------


def fit(method, preds, y, columns=None, seed=0, n_threads=1, **options) -> CombinerModel:
    """Fit one combiner by tag (see module docstring for the tags)."""
    m = method.upper()
    if m == "SA":
        return fit_sa(preds, y, columns)
    if m in ("SA-EX", "SA_EX", "SA-K"):
        return fit_sa_ex(preds, y, columns, exclude=options.get("exclude"))
    if m == "LR-AIC":
        return fit_lr_aic(preds, y, columns, n_threads=n_threads)
    if m == "LR-D":
        return fit_lr_d(preds, y, columns, alpha=options.get("alpha", 0.05))
    if m == "LR-C":
        return fit_lr_c(preds, y, columns)
    if m == "QR":
        return fit_qr_combiner(preds, y, columns, tau=options.get("tau", 0.5),
                               method=options.get("qr_method", "lp"))
    if m == "GB":
        keys = ("n_trees", "depth", "learning_rate", "min_samples_leaf")
        return fit_gb_combiner(preds, y, columns, seed=seed,
                               **{k: options[k] for k in keys if k in options})
    if m in ("ARM-A", "ARM-I"):
        cfg = ArmConfig(n_splits=options.get("n_splits", 50),
                        split_fraction=options.get("split_fraction", 0.5), seed=seed)
        if m == "ARM-A":
            return fit_arm(preds, y, columns, cfg)
        return fit_arm_i(preds, y, columns, cfg, n_threads=n_threads)
    if m == "SA-S":
        return fit_sa_s(preds, y, columns, n_threads=n_threads)
    raise InvalidInputError(f"unknown combining method {method!r}; use one of {METHODS}")


def predict(model: CombinerModel, preds, columns=None) -> np.ndarray:
    return model.predict(preds, columns)


def display_name(model: CombinerModel) -> str:
    if model.method == "SA-EX":
        return "SA(-" + ",".join(model.options.get("exclude", [])) + ")"
    return model.method
