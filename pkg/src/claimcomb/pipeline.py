"""Simulate, combine and report: the three batch steps behind the CLI.

Each step is a plain function taking already-parsed settings and returning
JSON-ready dictionaries, so the CLI stays a thin argument layer and tests
can drive the pipeline directly. Nothing here records wall-clock time in
its outputs; timings go to the logger only.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from . import combiners, data, metrics
from .exceptions import InfeasibleConfigError, InvalidInputError, SchemaError, SolverError

log = logging.getLogger(__name__)

REPORT_COLUMNS = ("MAE", "RMSE", "Re_RMSE", "Gini", "SUM")
# Column -> (MetricReport attribute, se attribute, lower is better).
_COLUMN_SPEC = {
    "MAE": ("mae", "se_mae", True),
    "RMSE": ("rmse", "se_rmse", True),
    "Re_RMSE": ("re_rmse", "se_re_rmse", True),
    "Gini": ("gini", None, False),
    "SUM": ("sum_err", None, None),  # best = closest to zero
}
# Columns carrying a paired test against the best base, and the loss used.
_TESTED = {"MAE": "absolute", "RMSE": "squared", "Re_RMSE": "squared"}


def dump_json(obj, path=None) -> str:
    """Stable JSON text (sorted keys, two-space indent, trailing newline)."""
    text = json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


def forecaster_specs(spec, seed):
    """``"default"`` (or ``None``) gives the twelve-forecaster line-up
    seeded from ``seed``; a list of dicts is parsed as ForecasterSpecs."""
    if spec is None or spec == "default":
        return data.default_forecasters(seed)
    if not isinstance(spec, list) or not spec:
        raise InfeasibleConfigError("forecasters must be 'default' or a non-empty list")
    out = []
    for j, d in enumerate(spec):
        if not isinstance(d, dict):
            raise InfeasibleConfigError(f"forecaster #{j + 1} is not an object")
        try:
            out.append(data.ForecasterSpec.from_dict(d))
        except TypeError as exc:
            raise InfeasibleConfigError(f"forecaster #{j + 1}: {exc}") from None
        except InvalidInputError as exc:
            raise InfeasibleConfigError(f"forecaster #{j + 1}: {exc}") from None
    return out


def simulation_summary(policies) -> dict:
    y = policies.y
    pos = y[y > 0]
    skew = float(stats.skew(pos, bias=False)) if pos.size > 2 else float("nan")
    return {
        "n": int(y.size),
        "zero_rate": float(np.mean(y == 0)),
        "mean_claim_cost": float(np.mean(y)),
        "nonzero_skewness": skew if math.isfinite(skew) else None,
    }


def run_simulate(sim: data.SimConfig, forecasters, out_dir) -> dict:
    """Write ``policies.csv`` and ``predictions.csv`` under ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    policies = data.simulate_claims(sim)
    names, matrix = data.synthesize_forecasters(policies, forecasters)
    data.write_policies(policies, out_dir / "policies.csv")
    data.write_predictions(out_dir / "predictions.csv", names, matrix)
    summary = simulation_summary(policies)
    summary.update(
        sim=sim.to_dict(),
        poisson_rate=sim.resolved_rate(),
        forecasters=[f.to_dict() for f in forecasters],
        files={"policies": "policies.csv", "predictions": "predictions.csv"},
    )
    dump_json(summary, out_dir / "simulation.json")
    return summary


# ---------------------------------------------------------------------------
# combine
# ---------------------------------------------------------------------------


def load_inputs(data_path, predictions_path):
    """Responses and the aligned prediction matrix (row_id must be 0..n-1)."""
    policies = data.load_policies(data_path)
    names, row_ids, matrix = data.read_predictions(predictions_path)
    n = len(policies)
    if matrix.shape[0] != n:
        raise SchemaError(f"{predictions_path}: {matrix.shape[0]} rows but the dataset has {n}")
    if not np.array_equal(row_ids, np.arange(n)):
        raise SchemaError(f"{predictions_path}: row_id must run 0..{n - 1} in order")
    return policies.y, names, matrix


def make_split(n, seed, split=None) -> data.SplitSpec:
    """``split`` is ``None`` (thirds), ``"reference"`` or a dict of counts."""
    if split is None or split == "thirds":
        return data.SplitSpec.thirds(n, seed)
    if split == "reference":
        return data.SplitSpec.reference(seed)
    if isinstance(split, dict):
        d = dict(split)
        d.setdefault("seed", seed)
        try:
            return data.SplitSpec(**d)
        except TypeError as exc:
            raise InfeasibleConfigError(f"split: {exc}") from None
    raise InfeasibleConfigError(f"unknown split {split!r}; use 'thirds', 'reference' or counts")


@dataclass
class CombineResult:
    split: data.SplitSpec
    models: list
    failures: list = field(default_factory=list)

    def to_dict(self):
        return {
            "split": self.split.to_dict(),
            "models": [m.to_dict() for m in self.models],
            "failures": self.failures,
        }


def run_combine(y, names, matrix, methods, seed, split=None, options=None,
                n_threads=1) -> CombineResult:
    """Fit every requested combiner on the weight-training subsample.

    A method that fails (solver or input error) is logged and listed in
    ``failures``; the others still run.
    """
    spec = make_split(y.size, seed, split)
    _, valid, _ = data.split_indices(y.size, spec)
    rows = data.weight_rows(spec, valid)
    P, yw = matrix[rows], y[rows]
    options = options or {}
    unknown = set(options) - set(combiners.METHODS)
    if unknown:
        raise InfeasibleConfigError(f"options given for unknown method(s): {sorted(unknown)}")
    models, failures = [], []
    for method in methods:
        if method not in combiners.METHODS:
            raise InfeasibleConfigError(
                f"unknown method {method!r}; use one of {', '.join(combiners.METHODS)}")
        t0 = time.perf_counter()
        try:
            model = combiners.fit(method, P, yw, names, seed=seed, n_threads=n_threads,
                                  **options.get(method, {}))
        except (SolverError, InvalidInputError) as exc:
            log.error("%s failed: %s", method, exc)
            failures.append({"method": method, "error": f"{type(exc).__name__}: {exc}"})
            continue
        log.info("%s fitted in %.3f s", method, time.perf_counter() - t0)
        models.append(model)
    return CombineResult(spec, models, failures)


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


def _best_index(values, lower):
    # NaN (undefined) entries never win.
    vals = np.asarray(values, dtype=np.float64)
    if lower is None:
        return int(np.nanargmin(np.abs(vals)))
    return int(np.nanargmin(vals) if lower else np.nanargmax(vals))


def _clean(d):
    return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in d.items()}


def build_report(y, names, matrix, models, alpha=0.05) -> dict:
    """Holdout evaluation of base and combined predictions.

    ``y`` / ``matrix`` are holdout rows only. Every combined row carries a
    paired t-test per loss column against the best base prediction of that
    column; ``significant`` is true iff p < alpha and the combined loss is
    lower.
    """
    rows = []
    for j, name in enumerate(names):
        rows.append({"name": name, "kind": "base", "pred": matrix[:, j]})
    for model in models:
        rows.append({"name": combiners.display_name(model), "kind": "combined",
                     "method": model.method, "pred": model.predict(matrix)})
    for r in rows:
        r["report"] = metrics.evaluate(y, r["pred"], strict=False)

    base = [r for r in rows if r["kind"] == "base"]
    best_base = {}
    for col in REPORT_COLUMNS:
        attr, se_attr, lower = _COLUMN_SPEC[col]
        b = base[_best_index([getattr(r["report"], attr) for r in base], lower)]
        best_base[col] = {"name": b["name"], "value": getattr(b["report"], attr),
                          "se": getattr(b["report"], se_attr) if se_attr else None}

    for r in rows:
        r["tests"] = {}
        if r["kind"] != "combined":
            continue
        for col, loss in _TESTED.items():
            ref = next(b for b in base if b["name"] == best_base[col]["name"])
            a, b = r["pred"], ref["pred"]
            if col == "Re_RMSE":
                if math.isnan(r["report"].lam):
                    continue
                a = r["report"].lam * a
                b = ref["report"].lam * b
            t = metrics.paired_loss_test(y, a, b, loss=loss, alpha=alpha)
            r["tests"][col] = {"against": ref["name"], "t": _finite(t.t_stat),
                               "p_value": t.p_value, "significant": t.better}

    best = {}
    for col in REPORT_COLUMNS:
        attr, _, lower = _COLUMN_SPEC[col]
        best[col] = rows[_best_index([getattr(r["report"], attr) for r in rows], lower)]["name"]

    return {
        "n_holdout": int(y.size),
        "alpha": alpha,
        "columns": list(REPORT_COLUMNS),
        "rows": [{"name": r["name"], "kind": r["kind"],
                  "metrics": _clean(r["report"].to_dict()), "tests": r["tests"]} for r in rows],
        "best_base": best_base,
        "best": best,
    }


def _finite(v):
    return v if math.isfinite(v) else ("inf" if v > 0 else "-inf")


def run_report(y, names, matrix, models, split, alpha=0.05) -> dict:
    _, _, hold = data.split_indices(y.size, split)
    if hold.size < 2:
        raise InfeasibleConfigError("the holdout part needs at least two rows")
    rep = build_report(y[hold], names, matrix[hold], models, alpha=alpha)
    rep["split"] = split.to_dict()
    return rep


def holdout_lorenz(y, split):
    _, _, hold = data.split_indices(y.size, split)
    return metrics.lorenz_points(y[hold], include_origin=True)


# ---------------------------------------------------------------------------
# report rendering
# ---------------------------------------------------------------------------


def _cell(row, col, report):
    attr, se_attr, _ = _COLUMN_SPEC[col]
    m = row["metrics"]
    if m[attr] is None:
        return "n/a"
    if col == "Gini":
        text = f"{m[attr]:.4f}"
    elif col == "SUM":
        text = f"{m[attr]:.3f}"
    else:
        text = f"{m[attr]:.2f}"
    if col in _TESTED and row["tests"].get(col, {}).get("significant"):
        text += "*"
    if se_attr:
        text += f"({m[se_attr]:.2f})"
    if report["best"][col] == row["name"]:
        text = f"[{text}]"
    return text


def _best_base_cells(report):
    cells = []
    for col in REPORT_COLUMNS:
        b = report["best_base"][col]
        if col == "Gini":
            text = f"{b['value']:.4f}"
        elif col == "SUM":
            text = f"{b['value']:.3f}"
        else:
            text = f"{b['value']:.2f}({b['se']:.2f})"
        cells.append(text)
    return cells


def render_text(report) -> str:
    header = ["Prediction", *report["columns"]]
    body = [[r["name"], *(_cell(r, c, report) for c in report["columns"])]
            for r in report["rows"]]
    body.insert(sum(r["kind"] == "base" for r in report["rows"]),
                ["Best_base", *_best_base_cells(report)])
    table = [header, *body]
    widths = [max(len(row[i]) for row in table) for i in range(len(header))]
    lines = []
    for k, row in enumerate(table):
        cells = [row[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(row[1:], widths[1:])]
        lines.append("  ".join(cells).rstrip())
        if k == 0:
            lines.append("-" * len(lines[0]))
    lines.append("")
    lines.append(f"holdout rows: {report['n_holdout']}; [x] best in column; "
                 f"* paired t-test vs best base, p < {report['alpha']:g}")
    return "\n".join(lines) + "\n"


def render_csv(report) -> str:
    import csv
    import io

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    head = ["prediction", "kind"]
    for col in report["columns"]:
        head.append(col)
        if _COLUMN_SPEC[col][1]:
            head.append(f"{col}_se")
        if col in _TESTED:
            head += [f"{col}_p", f"{col}_sig"]
    w.writerow(head)
    for r in report["rows"]:
        m = r["metrics"]
        out = [r["name"], r["kind"]]
        for col in report["columns"]:
            attr, se_attr, _ = _COLUMN_SPEC[col]
            out.append(_csv_num(m[attr]))
            if se_attr:
                out.append(_csv_num(m[se_attr]))
            if col in _TESTED:
                t = r["tests"].get(col)
                out += ([repr(t["p_value"]), "1" if t["significant"] else "0"] if t else ["", ""])
        w.writerow(out)
    return buf.getvalue()


def _csv_num(v):
    return "" if v is None else repr(v)


def render(report, fmt) -> str:
    if fmt == "text":
        return render_text(report)
    if fmt == "csv":
        return render_csv(report)
    if fmt == "json":
        return dump_json(report)
    raise InfeasibleConfigError(f"unknown format {fmt!r}; use text, csv or json")


def write_lorenz_csv(points, path) -> None:
    lines = ["population_fraction,claim_fraction"]
    lines += [f"{p!r},{c!r}" for p, c in points.tolist()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
