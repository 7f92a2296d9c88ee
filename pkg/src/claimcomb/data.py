"""Policy data: CSV ingestion, deterministic splits, and synthetic generators.

Randomness always comes from ``numpy.random.Generator`` on the PCG64 bit
generator seeded from an integer, so identical seeds and configs give
bit-identical output on any platform running the same numpy release.
"""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import asdict, dataclass, field, fields
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np
from scipy import optimize

from .exceptions import InfeasibleConfigError, InvalidInputError, SchemaError

POLICY_COLUMNS = (
    "veh_value",
    "exposure",
    "clm",
    "numclaims",
    "claimcst0",
    "veh_body",
    "veh_age",
    "gender",
    "area",
    "agecat",
)
_FLOAT_COLUMNS = ("veh_value", "exposure", "claimcst0")
_INT_COLUMNS = ("clm", "numclaims", "veh_age", "agecat")
_CATEGORICAL_COLUMNS = ("veh_body", "gender", "area")

REFERENCE_SPLIT_COUNTS = (22610, 22629, 22617)


class ConsistencyWarning(UserWarning):
    """A loaded row violates clm/numclaims/claimcst0 consistency."""


# ---------------------------------------------------------------------------
# records
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PolicyRecord:
    veh_value: float
    veh_body: str
    veh_age: int
    gender: str
    area: str
    agecat: int
    exposure: float
    claimcst0: float
    numclaims: int
    clm: int


@dataclass(eq=False)
class Policies:
    """Column-oriented, read-only collection of policy records.

    ``expected_cost`` and ``claim_rate`` hold the true conditional mean cost
    and Poisson intensity; they exist only for simulated data.
    """

    veh_value: np.ndarray
    veh_body: np.ndarray
    veh_age: np.ndarray
    gender: np.ndarray
    area: np.ndarray
    agecat: np.ndarray
    exposure: np.ndarray
    claimcst0: np.ndarray
    numclaims: np.ndarray
    clm: np.ndarray
    expected_cost: np.ndarray | None = None
    claim_rate: np.ndarray | None = None
    issues: list = field(default_factory=list)

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, np.ndarray):
                v.setflags(write=False)

    def __len__(self):
        return int(self.claimcst0.shape[0])

    def subset(self, idx) -> "Policies":
        idx = np.asarray(idx)
        kw = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, np.ndarray):
                kw[f.name] = v[idx].copy()
            elif f.name == "issues":
                kw[f.name] = []
            else:
                kw[f.name] = v
        return Policies(**kw)

    def record(self, i) -> PolicyRecord:
        return PolicyRecord(
            veh_value=float(self.veh_value[i]),
            veh_body=str(self.veh_body[i]),
            veh_age=int(self.veh_age[i]),
            gender=str(self.gender[i]),
            area=str(self.area[i]),
            agecat=int(self.agecat[i]),
            exposure=float(self.exposure[i]),
            claimcst0=float(self.claimcst0[i]),
            numclaims=int(self.numclaims[i]),
            clm=int(self.clm[i]),
        )

    def records(self):
        return [self.record(i) for i in range(len(self))]

    @property
    def y(self) -> np.ndarray:
        return self.claimcst0


def _intern_column(values):
    table = {}
    return np.array([table.setdefault(v, v) for v in values], dtype=object)


def load_policies(path, required=POLICY_COLUMNS) -> Policies:
    """Read a policy CSV with the ``POLICY_COLUMNS`` schema (header row, comma separated, UTF-8).

    Extra columns are ignored. Rows violating ``clm = 1 <=> numclaims >= 1
    <=> claimcst0 > 0`` or ``0 < exposure <= 1`` are kept; each one adds a
    message to ``Policies.issues`` and one ``ConsistencyWarning`` summarises
    the count.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in required if c not in header]
        if missing:
            raise SchemaError(f"{path}: missing required column(s): {', '.join(missing)}")
        cols = {c: [] for c in POLICY_COLUMNS}
        for lineno, row in enumerate(reader, start=2):
            for c in _FLOAT_COLUMNS:
                cols[c].append(_parse(row[c], float, c, lineno, path))
            for c in _INT_COLUMNS:
                cols[c].append(_parse(row[c], int, c, lineno, path))
            for c in _CATEGORICAL_COLUMNS:
                cols[c].append(row[c].strip())
    arrays = {c: np.asarray(cols[c], dtype=np.float64) for c in _FLOAT_COLUMNS}
    arrays.update({c: np.asarray(cols[c], dtype=np.int64) for c in _INT_COLUMNS})
    arrays.update({c: _intern_column(cols[c]) for c in _CATEGORICAL_COLUMNS})
    neg = np.flatnonzero(arrays["claimcst0"] < 0)
    if neg.size:
        raise SchemaError(f"{path}: negative claimcst0 on data row {int(neg[0]) + 1}")
    issues = _consistency_issues(arrays)
    if issues:
        warnings.warn(
            f"{path}: {len(issues)} row(s) violate claim consistency", ConsistencyWarning
        )
    return Policies(**arrays, issues=issues)


def _parse(text, kind, column, lineno, path):
    try:
        value = float(text)
    except (TypeError, ValueError):
        raise SchemaError(f"{path}:{lineno}: unparseable {column} value {text!r}") from None
    if not math.isfinite(value):
        raise SchemaError(f"{path}:{lineno}: non-finite {column} value {text!r}")
    if kind is int:
        if value != int(value):
            raise SchemaError(f"{path}:{lineno}: {column} must be an integer, got {text!r}")
        return int(value)
    return value


def _consistency_issues(a):
    issues = []
    has_claim = a["clm"] == 1
    has_count = a["numclaims"] >= 1
    has_cost = a["claimcst0"] > 0
    bad = np.flatnonzero((has_claim != has_count) | (has_count != has_cost))
    for i in bad:
        issues.append(
            f"row {int(i) + 1}: clm={a['clm'][i]} numclaims={a['numclaims'][i]} "
            f"claimcst0={a['claimcst0'][i]!r}"
        )
    exp = a["exposure"]
    for i in np.flatnonzero(~((exp > 0) & (exp <= 1))):
        issues.append(f"row {int(i) + 1}: exposure {exp[i]!r} outside (0, 1]")
    return issues


def write_policies(policies: Policies, path) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(POLICY_COLUMNS)
        cols = [getattr(policies, c) for c in POLICY_COLUMNS]
        for row in zip(*cols):
            w.writerow([_fmt(v) for v in row])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def read_predictions(path):
    """Read a prediction-matrix CSV: ``row_id`` then one column per forecaster.

    Returns ``(names, row_ids, matrix)``.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty prediction file") from None
        if not header or header[0] != "row_id" or len(header) < 2:
            raise SchemaError(f"{path}: header must start with row_id and name >= 1 forecaster")
        names = header[1:]
        ids, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise SchemaError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            ids.append(_parse(row[0], int, "row_id", lineno, path))
            rows.append([_parse(v, float, names[j], lineno, path) for j, v in enumerate(row[1:])])
    matrix = np.asarray(rows, dtype=np.float64).reshape(len(rows), len(names))
    return names, np.asarray(ids, dtype=np.int64), matrix


def write_predictions(path, names, matrix, row_ids=None) -> None:
    matrix = np.asarray(matrix, dtype=np.float64)
    if row_ids is None:
        row_ids = np.arange(matrix.shape[0])
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row_id", *names])
        for rid, row in zip(row_ids, matrix):
            w.writerow([str(int(rid)), *(repr(float(v)) for v in row)])


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    seed: int
    n_train: int
    n_valid: int
    n_holdout: int
    weight_subsample: int = 5000

    def __post_init__(self):
        counts = (self.n_train, self.n_valid, self.n_holdout, self.weight_subsample)
        if any(int(c) != c or c < 0 for c in counts):
            raise InfeasibleConfigError(f"split counts must be nonnegative integers: {counts}")
        if self.weight_subsample > self.n_valid:
            raise InfeasibleConfigError(
                f"weight_subsample {self.weight_subsample} exceeds n_valid {self.n_valid}"
            )

    @property
    def n(self):
        return self.n_train + self.n_valid + self.n_holdout

    @classmethod
    def thirds(cls, n, seed, weight_subsample=5000):
        third = n // 3
        return cls(seed, third, third, n - 2 * third, min(weight_subsample, third))

    @classmethod
    def reference(cls, seed, weight_subsample=5000):
        return cls(seed, *REFERENCE_SPLIT_COUNTS, weight_subsample)

    def to_dict(self):
        return asdict(self)


def split_indices(n, spec: SplitSpec):
    """Random uniform three-way partition of ``range(n)``; each part sorted."""
    if spec.n != n:
        raise InfeasibleConfigError(
            f"split counts {spec.n_train}+{spec.n_valid}+{spec.n_holdout} != {n} rows"
        )
    perm = np.random.default_rng(spec.seed).permutation(n)
    a, b = spec.n_train, spec.n_train + spec.n_valid
    return np.sort(perm[:a]), np.sort(perm[a:b]), np.sort(perm[b:])


def split(records, spec: SplitSpec):
    """Split a ``Policies`` collection into (train, valid, holdout)."""
    tr, va, ho = split_indices(len(records), spec)
    return records.subset(tr), records.subset(va), records.subset(ho)


def weight_training_subsample(valid, k, seed) -> np.ndarray:
    """Sorted positions of ``k`` rows drawn without replacement from ``valid``.

    ``valid`` may be a row count or any sized collection.
    """
    n = valid if isinstance(valid, (int, np.integer)) else len(valid)
    if k > n or k < 0:
        raise InfeasibleConfigError(f"cannot draw {k} rows from {n}")
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1,)))
    return np.sort(rng.choice(n, size=k, replace=False))


def weight_rows(spec: SplitSpec, valid_idx) -> np.ndarray:
    """Dataset row indices of the weight-training subsample."""
    return np.asarray(valid_idx)[weight_training_subsample(len(valid_idx), spec.weight_subsample, spec.seed)]


# ---------------------------------------------------------------------------
# simulator
# ---------------------------------------------------------------------------


@lru_cache(maxsize=1)
def covariate_model():
    """Categorical level frequencies and frequency relativities (package data)."""
    text = resources.files("claimcomb").joinpath("covariates.json").read_text()
    return json.loads(text)


def _relativity_normaliser(model):
    z = 1.0
    for name in ("veh_body", "veh_age", "gender", "area", "agecat"):
        p = np.asarray(model[name]["probs"], dtype=np.float64)
        z *= float(p @ np.asarray(model[name]["relativity"]) / p.sum())
    vv = model["veh_value"]
    z *= math.exp(0.5 * (vv["elasticity"] * vv["log_sd"]) ** 2)
    return z


@lru_cache(maxsize=1)
def _multiplier_grid():
    """Support points and probabilities of the normalised risk multiplier."""
    model = covariate_model()
    m = np.ones(1)
    w = np.ones(1)
    for name in ("veh_body", "veh_age", "gender", "area", "agecat"):
        p = np.asarray(model[name]["probs"], dtype=np.float64)
        p = p / p.sum()
        r = np.asarray(model[name]["relativity"], dtype=np.float64)
        m = np.outer(m, r).ravel()
        w = np.outer(w, p).ravel()
    nodes, weights = np.polynomial.hermite_e.hermegauss(48)
    vv = model["veh_value"]
    v = np.exp(vv["elasticity"] * vv["log_sd"] * nodes)
    m = np.outer(m, v).ravel() / _relativity_normaliser(model)
    w = np.outer(w, weights / weights.sum()).ravel()
    return m, w


def expected_zero_rate(rate) -> float:
    """P(no claim) = E[exp(-rate * exposure * m)], exposure ~ U(0, 1]."""
    if rate <= 0:
        return 1.0
    m, w = _multiplier_grid()
    x = rate * m
    return float(w @ (-np.expm1(-x) / x))


def rate_for_zero_rate(target) -> float:
    if not 0 < target < 1:
        raise InfeasibleConfigError(f"zero_rate_target must lie in (0, 1), got {target}")
    return float(optimize.brentq(lambda r: expected_zero_rate(r) - target, 1e-12, 1e6, xtol=1e-14, rtol=1e-13))


@dataclass(frozen=True)
class SimConfig:
    """Compound Poisson-Gamma simulator settings.

    ``poisson_rate`` is the claim intensity per policy-year for an average
    risk. When it is ``None`` it is solved from ``zero_rate_target``; when
    both are given the implied zero rate must be within 0.02 of the target.
    """

    n: int = 20000
    zero_rate_target: float | None = 0.94
    poisson_rate: float | None = None
    gamma_shape: float = 0.6
    gamma_scale: float = 3500.0
    seed: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise InfeasibleConfigError("n must be >= 1")
        if self.gamma_shape <= 0 or self.gamma_scale <= 0:
            raise InfeasibleConfigError("gamma_shape and gamma_scale must be > 0")
        if self.zero_rate_target is None and self.poisson_rate is None:
            raise InfeasibleConfigError("give zero_rate_target or poisson_rate")
        if self.zero_rate_target is not None and not 0 < self.zero_rate_target < 1:
            raise InfeasibleConfigError("zero_rate_target must lie in (0, 1)")
        if self.poisson_rate is not None and self.poisson_rate < 0:
            raise InfeasibleConfigError("poisson_rate must be >= 0")

    def resolved_rate(self) -> float:
        if self.poisson_rate is None:
            return rate_for_zero_rate(self.zero_rate_target)
        if self.zero_rate_target is not None:
            implied = expected_zero_rate(self.poisson_rate)
            if abs(implied - self.zero_rate_target) > 0.02:
                raise InfeasibleConfigError(
                    f"poisson_rate {self.poisson_rate} implies zero rate {implied:.4f}, "
                    f"not {self.zero_rate_target}; drop one of the two or reconcile them"
                )
        return float(self.poisson_rate)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise InfeasibleConfigError(f"unknown SimConfig key(s): {sorted(extra)}")
        return cls(**d)

    def to_dict(self):
        return asdict(self)


def _draw_categorical(rng, spec, n):
    p = np.asarray(spec["probs"], dtype=np.float64)
    idx = rng.choice(len(p), size=n, p=p / p.sum())
    return idx


def simulate_claims(config: SimConfig) -> Policies:
    """Draw policies with covariates, exposure ~ U(0, 1], Poisson claim counts
    and Gamma severities (the sum of ``k`` Gamma(shape, scale) draws is drawn
    as one Gamma(k * shape, scale))."""
    rate = config.resolved_rate()
    model = covariate_model()
    rng = np.random.default_rng(config.seed)
    n = config.n

    mult = np.ones(n)
    cats = {}
    for name in ("veh_body", "veh_age", "gender", "area", "agecat"):
        idx = _draw_categorical(rng, model[name], n)
        levels = model[name]["levels"]
        mult *= np.asarray(model[name]["relativity"], dtype=np.float64)[idx]
        if isinstance(levels[0], str):
            cats[name] = _intern_column(levels[i] for i in idx)
        else:
            cats[name] = np.asarray(levels, dtype=np.int64)[idx]
    vv = model["veh_value"]
    z = rng.standard_normal(n)
    veh_value = np.exp(vv["log_mean"] + vv["log_sd"] * z)
    mult *= np.exp(vv["elasticity"] * vv["log_sd"] * z)
    mult /= _relativity_normaliser(model)

    exposure = 1.0 - rng.random(n)  # (0, 1]
    lam = rate * exposure * mult
    numclaims = rng.poisson(lam).astype(np.int64)
    cost = np.zeros(n)
    pos = numclaims > 0
    draws = rng.gamma(config.gamma_shape * numclaims[pos], config.gamma_scale)
    cost[pos] = np.maximum(draws, np.finfo(np.float64).tiny)
    clm = pos.astype(np.int64)
    mean_cost = lam * config.gamma_shape * config.gamma_scale
    return Policies(
        veh_value=veh_value,
        exposure=exposure,
        claimcst0=cost,
        numclaims=numclaims,
        clm=clm,
        expected_cost=mean_cost,
        claim_rate=lam,
        **cats,
    )


# ---------------------------------------------------------------------------
# synthetic forecasters
# ---------------------------------------------------------------------------

FORECASTER_KINDS = ("two-stage", "direct-severity", "rank-oracle-misscaled", "noisy-null")


@dataclass(frozen=True)
class ForecasterSpec:
    """One synthetic forecaster.

    ``zero_fraction`` (two-stage only) is the share of policies predicted to
    have no claim. ``power`` is the exponent of the monotone transform
    applied to the true mean (claim rate for two-stage) before rescaling to
    the same average; below 1 it flattens the signal, above 1 it
    exaggerates it. Ignored by noisy-null.
    """

    kind: str
    noise_level: float = 0.0
    scale_bias: float = 1.0
    seed: int = 0
    name: str | None = None
    zero_fraction: float = 0.5
    power: float = 1.0

    def __post_init__(self):
        kind = self.kind.replace("_", "-").lower()
        if kind not in FORECASTER_KINDS:
            raise InvalidInputError(f"unknown forecaster kind {self.kind!r}; use one of {FORECASTER_KINDS}")
        object.__setattr__(self, "kind", kind)
        if self.noise_level < 0:
            raise InvalidInputError("noise_level must be >= 0")
        if self.scale_bias <= 0:
            raise InvalidInputError("scale_bias must be > 0")
        if not 0 <= self.zero_fraction < 1:
            raise InvalidInputError("zero_fraction must lie in [0, 1)")
        if self.power <= 0:
            raise InvalidInputError("power must be > 0")

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def to_dict(self):
        return asdict(self)


def _lognormal_noise(rng, sigma, n):
    if sigma == 0:
        return np.ones(n)
    return np.exp(sigma * rng.standard_normal(n) - 0.5 * sigma * sigma)


def _power_transform(v, power):
    # Monotone, mean-preserving.
    if power == 1.0:
        return v.copy()
    g = v ** power
    return g * (v.mean() / g.mean())


def _forecast(spec, mu, lam):
    rng = np.random.default_rng(spec.seed)
    n = mu.size
    if spec.kind == "noisy-null":
        return spec.scale_bias * mu.mean() * _lognormal_noise(rng, spec.noise_level, n)
    if spec.kind in ("direct-severity", "rank-oracle-misscaled"):
        g = _power_transform(mu, spec.power)
        return spec.scale_bias * g * _lognormal_noise(rng, spec.noise_level, n)
    # two-stage: noisy claim frequency times a constant severity estimate,
    # zeroed where the frequency model predicts no claim.
    severity = np.divide(mu, lam, out=np.zeros(n), where=lam > 0)
    lam_hat = _power_transform(lam, spec.power) * _lognormal_noise(rng, spec.noise_level, n)
    pred = spec.scale_bias * lam_hat * severity
    n_zero = int(math.floor(spec.zero_fraction * n))
    if n_zero:
        pred[np.argsort(lam_hat, kind="stable")[:n_zero]] = 0.0
    return pred


def synthesize_forecasters(records: Policies, specs):
    """Prediction matrix (n x len(specs)) from simulated records.

    Needs ``records.expected_cost``; returns ``(names, matrix)``.
    """
    specs = list(specs)
    if not specs:
        raise InvalidInputError("at least one ForecasterSpec is required")
    if records.expected_cost is None or records.claim_rate is None:
        raise InvalidInputError("synthetic forecasters need simulated records (true means unknown)")
    mu = np.asarray(records.expected_cost, dtype=np.float64)
    lam = np.asarray(records.claim_rate, dtype=np.float64)
    names = [s.name or f"A{j + 1}" for j, s in enumerate(specs)]
    if len(set(names)) != len(names):
        raise InvalidInputError(f"duplicate forecaster names: {names}")
    cols = [_forecast(s, mu, lam) for s in specs]
    return names, np.column_stack(cols)


def default_forecasters(seed=0):
    """The standard twelve-forecaster line-up A1..A12.

    Eleven weak predictors (flattened signal, lognormal noise): four
    two-stage, two of which predict almost nothing, plus direct and
    near-null ones. A5 is the rank oracle: ``mu ** 1.4`` scaled by 1.27,
    so it has the best Gini, SUM near +0.27 and the worst RMSE.
    """
    base = int(seed) * 1000
    S = ForecasterSpec
    weak = 0.2
    return [
        S("two-stage", 0.8, 1.0, base + 1, "A1", zero_fraction=0.995, power=weak),
        S("two-stage", 0.8, 1.0, base + 2, "A2", zero_fraction=0.98, power=weak),
        S("two-stage", 0.8, 0.95, base + 3, "A3", zero_fraction=0.3, power=weak),
        S("two-stage", 0.8, 0.95, base + 4, "A4", zero_fraction=0.2, power=weak),
        S("rank-oracle-misscaled", 0.0, 1.27, base + 5, "A5", power=1.4),
        S("direct-severity", 0.8, 0.93, base + 6, "A6", power=weak),
        S("noisy-null", 0.3, 0.4, base + 7, "A7"),
        S("noisy-null", 1.0, 0.35, base + 8, "A8"),
        S("direct-severity", 0.8, 0.95, base + 9, "A9", power=weak),
        S("direct-severity", 1.04, 0.93, base + 10, "A10", power=weak),
        S("direct-severity", 0.8, 0.95, base + 11, "A11", power=weak),
        S("direct-severity", 0.8, 0.55, base + 12, "A12", power=0.14),
    ]


def perturb_predictions(matrix, y, columns, level=0.2, seed=0):
    """Feedback-round perturbation of selected forecaster columns.

    Adds independent Gaussian noise whose variance is ``level`` times the
    column's mean squared error against ``y``; other columns are copied
    unchanged.
    """
    P = np.array(matrix, dtype=np.float64, copy=True)
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (P.shape[0],):
        raise InvalidInputError("y must align with the prediction rows")
    rng = np.random.default_rng(seed)
    for j in columns:
        mse = float(np.mean((y - P[:, j]) ** 2))
        P[:, j] += math.sqrt(level * mse) * rng.standard_normal(P.shape[0])
    return P
