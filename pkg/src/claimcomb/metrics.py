"""Accuracy measures for zero-inflated claim-cost predictions.

All five measures (MAE, RMSE, rebalanced RMSE, normalized Gini, SUM error),
their standard errors, a paired t-test on per-row losses, and Lorenz-curve
points. Every function is pure and works in float64.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import stats

from . import kernels
from .exceptions import InvalidInputError, UndefinedMetricError

__all__ = [
    "MetricReport",
    "PairedTestResult",
    "rank_with_tiebreak",
    "gini",
    "mae",
    "rmse",
    "rebalanced_rmse",
    "sum_error",
    "metric_ses",
    "evaluate",
    "paired_loss_test",
    "lorenz_points",
]


def _as_vector(values, name="values"):
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise InvalidInputError(f"{name} must be one-dimensional, got shape {arr.shape}")
    if arr.size == 0:
        raise InvalidInputError(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite values")
    return arr


def _response(y):
    y = _as_vector(y, "y")
    if np.any(y < 0):
        raise InvalidInputError("claim costs must be nonnegative")
    return y


def _pair(y, yhat):
    y = _response(y)
    yhat = _as_vector(yhat, "yhat")
    if y.shape != yhat.shape:
        raise InvalidInputError(f"length mismatch: y has {y.size}, yhat has {yhat.size}")
    return y, yhat


def rank_with_tiebreak(s) -> np.ndarray:
    """Ranks 1..n in increasing order; among equal values the earlier index
    gets the higher rank.

    >>> rank_with_tiebreak([0, 10, 0]).tolist()
    [2, 3, 1]
    """
    s = _as_vector(s, "s")
    n = s.size
    # Stable sort of the reversed sequence puts later duplicates first.
    rev_order = np.argsort(s[::-1], kind="stable")
    ranks = np.empty(n, dtype=np.int64)
    ranks[n - 1 - rev_order] = np.arange(1, n + 1)
    return ranks


def gini(y, yhat) -> float:
    """Normalized Gini index of ``yhat`` against ``y``.

    Uses the centered form ``sum y_i (R(yhat_i) - (n+1)/2)`` over the same
    sum with ``R(y_i)``, which is algebraically the ratio of the two
    normalized Lorenz differences. The compensated sums keep the extremes
    exactly at +1 (rank agreement) and -1 (rank reversal).
    """
    y, yhat = _pair(y, yhat)
    if not y.sum() > 0:
        raise UndefinedMetricError("Gini is undefined when all claim costs are zero")
    num = kernels.centered_weighted_sum(y, rank_with_tiebreak(yhat).astype(np.float64))
    den = kernels.centered_weighted_sum(y, rank_with_tiebreak(y).astype(np.float64))
    if not den > 0:
        raise UndefinedMetricError(
            "Gini is undefined: the responses carry no ordering (denominator is zero)"
        )
    return float(num / den)


def mae(y, yhat) -> float:
    y, yhat = _pair(y, yhat)
    return float(np.mean(np.abs(y - yhat)))


def rmse(y, yhat) -> float:
    y, yhat = _pair(y, yhat)
    d = y - yhat
    return float(math.sqrt(np.mean(d * d)))


def rebalanced_rmse(y, yhat) -> tuple[float, float]:
    """RMSE after rescaling ``yhat`` so its total matches ``y``.

    Returns ``(re_rmse, lam)`` with ``lam = sum(y) / sum(yhat)``.
    """
    y, yhat = _pair(y, yhat)
    total_hat = math.fsum(yhat.tolist())
    if total_hat == 0:
        raise UndefinedMetricError("rebalancing scale undefined: predictions sum to zero")
    lam = math.fsum(y.tolist()) / total_hat
    if not math.isfinite(lam):
        raise UndefinedMetricError("rebalancing scale overflows: predictions sum is too small")
    return rmse(y, lam * yhat), float(lam)


def sum_error(y, yhat) -> float:
    """Relative error of the predicted total, ``(sum yhat - sum y) / sum y``."""
    y, yhat = _pair(y, yhat)
    total = math.fsum(y.tolist())
    if total == 0:
        raise UndefinedMetricError("SUM error undefined when all claim costs are zero")
    return (math.fsum(yhat.tolist()) - total) / total


def _se_of_rmse(residuals, value):
    n = residuals.size
    if value == 0:
        return 0.0
    sq = residuals * residuals
    return float(np.std(sq, ddof=1) / (2.0 * value * math.sqrt(n)))


def metric_ses(y, yhat) -> tuple[float, float, float]:
    """Standard errors ``(se_mae, se_rmse, se_re_rmse)``.

    MAE: sample sd of ``|y - yhat|`` over sqrt(n). RMSE: delta method on the
    mean squared residual, ``sd(r^2) / (2 rmse sqrt(n))``. Re-RMSE: same on
    ``y - lam * yhat`` with ``lam`` held fixed. A perfect fit reports 0.
    """
    y, yhat = _pair(y, yhat)
    n = y.size
    if n < 2:
        raise InvalidInputError("standard errors need at least two rows")
    r = y - yhat
    se_mae = float(np.std(np.abs(r), ddof=1) / math.sqrt(n))
    se_rmse = _se_of_rmse(r, rmse(y, yhat))
    re_value, lam = rebalanced_rmse(y, yhat)
    se_re = _se_of_rmse(y - lam * yhat, re_value)
    return se_mae, se_rmse, se_re


@dataclass(frozen=True)
class MetricReport:
    mae: float
    rmse: float
    re_rmse: float
    gini: float
    sum_err: float
    se_mae: float
    se_rmse: float
    se_re_rmse: float
    lam: float
    n: int
    n_negative: int = 0

    COLUMNS = ("MAE", "RMSE", "Re_RMSE", "Gini", "SUM")

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    def cells(self):
        """Text cells in MAE, RMSE, Re_RMSE, Gini, SUM order."""
        return [
            f"{self.mae:.2f}({self.se_mae:.2f})",
            f"{self.rmse:.2f}({self.se_rmse:.2f})",
            f"{self.re_rmse:.2f}({self.se_re_rmse:.2f})",
            f"{self.gini:.4f}",
            f"{self.sum_err:.3f}",
        ]

    def to_row(self, label="", width=18):
        cells = [label.ljust(12)] + [c.rjust(width) for c in self.cells()]
        return " ".join(cells)


def evaluate(y, yhat, strict=True) -> MetricReport:
    """All five measures plus standard errors for one prediction.

    With ``strict=False`` a prediction summing to zero reports NaN for the
    rebalanced RMSE, its SE and ``lam`` instead of raising.
    """
    y, yhat = _pair(y, yhat)
    n = y.size
    if n < 2:
        raise InvalidInputError("standard errors need at least two rows")
    r = y - yhat
    value = rmse(y, yhat)
    try:
        re_value, lam = rebalanced_rmse(y, yhat)
        se_re = _se_of_rmse(y - lam * yhat, re_value)
    except UndefinedMetricError:
        if strict:
            raise
        re_value = lam = se_re = math.nan
    return MetricReport(
        mae=mae(y, yhat),
        rmse=value,
        re_rmse=re_value,
        gini=gini(y, yhat),
        sum_err=sum_error(y, yhat),
        se_mae=float(np.std(np.abs(r), ddof=1) / math.sqrt(n)),
        se_rmse=_se_of_rmse(r, value),
        se_re_rmse=se_re,
        lam=lam,
        n=int(n),
        n_negative=int(np.count_nonzero(yhat < 0)),
    )


@dataclass(frozen=True)
class PairedTestResult:
    t_stat: float
    p_value: float
    mean_diff: float
    better: bool
    loss: str
    n: int

    def to_dict(self):
        return asdict(self)


def _loss(y, yhat, loss):
    if loss == "absolute":
        return np.abs(y - yhat)
    if loss == "squared":
        d = y - yhat
        return d * d
    raise InvalidInputError(f"unknown loss {loss!r}; use 'absolute' or 'squared'")


def paired_loss_test(y, yhat_a, yhat_b, loss="squared", alpha=0.05) -> PairedTestResult:
    """Two-sided paired t-test on ``L(y, yhat_a) - L(y, yhat_b)``.

    ``better`` is true when ``a`` has the lower mean loss and p < alpha.
    Zero-variance differences: mean 0 gives p = 1 (t = 0), nonzero mean
    gives p = 0 (t = +-inf).
    """
    y, yhat_a = _pair(y, yhat_a)
    _, yhat_b = _pair(y, yhat_b)
    n = y.size
    if n < 2:
        raise InvalidInputError("paired test needs at least two rows")
    d = _loss(y, yhat_a, loss) - _loss(y, yhat_b, loss)
    mean_d = float(np.mean(d))
    sd = float(np.std(d, ddof=1))
    if sd == 0.0:
        if mean_d == 0.0:
            t_stat, p = 0.0, 1.0
        else:
            t_stat, p = math.copysign(math.inf, mean_d), 0.0
    else:
        t_stat = mean_d / (sd / math.sqrt(n))
        p = float(2.0 * stats.t.sf(abs(t_stat), df=n - 1))
        p = min(1.0, max(0.0, p))
    return PairedTestResult(
        t_stat=float(t_stat),
        p_value=p,
        mean_diff=mean_d,
        better=bool(p < alpha and mean_d < 0),
        loss=loss,
        n=int(n),
    )


def lorenz_points(y, include_origin=False) -> np.ndarray:
    """Lorenz curve of claim costs: rows of (population fraction, claim fraction).

    Policies are sorted ascending by cost; the last point is (1, 1).
    """
    y = _response(y)
    total = math.fsum(y.tolist())
    if total == 0:
        raise UndefinedMetricError("Lorenz curve undefined when all claim costs are zero")
    n = y.size
    cum = np.cumsum(np.sort(y, kind="stable"))
    pts = np.column_stack([np.arange(1, n + 1) / n, cum / cum[-1]])
    pts[-1] = (1.0, 1.0)
    if include_origin:
        pts = np.vstack([[0.0, 0.0], pts])
    return pts
