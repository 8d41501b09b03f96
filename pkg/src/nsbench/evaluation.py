"""Relative-error metrics, box statistics, nonstationarity benchmarks and report files."""

from __future__ import annotations

import csv
import hashlib
import io
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .grid import GridSpec, Realization, read_realization, write_realization
from .sgs import dataset_settings, default_ranges, derive_seed, realization_for
from .variogram import oracle_range

Predictor = Callable[[Realization], float]


def relative_error(y, y_hat, absolute: bool = False):
    """(y - y_hat) / y, or its absolute value; y must be positive."""
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if np.any(~(y > 0)):
        raise ValueError("relative_error needs a positive true range")
    e = (y - y_hat) / y
    e = np.abs(e) if absolute else e
    return float(e) if e.ndim == 0 else e


def box_stats(values) -> dict:
    """Quartiles by linear interpolation; whiskers at the most extreme points within 1.5 IQR."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size == 0:
        raise ValueError("box_stats of an empty group")
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    iqr = q3 - q1
    lo_fence, hi_fence = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    inside = v[(v >= lo_fence) & (v <= hi_fence)]
    return {"n": int(v.size), "mean": float(v.mean()), "mean_abs": float(np.abs(v).mean()),
            "q1": float(q1), "median": float(med), "q3": float(q3), "iqr": float(iqr),
            "whisker_low": float(inside.min()), "whisker_high": float(inside.max()),
            "outliers": [float(x) for x in v[(v < lo_fence) | (v > hi_fence)]]}


@dataclass(frozen=True)
class Record:
    range_m: float
    predicted: float
    trend_proportion: float = 0.0
    seed: int = 0
    nonstat_type: str = "stationary"

    @property
    def rel_error(self) -> float:
        return relative_error(self.range_m, self.predicted)

    @property
    def abs_error(self) -> float:
        return abs(self.rel_error)


RECORD_FIELDS = ("range_m", "trend_proportion", "seed", "nonstat_type", "predicted", "rel_error")


@dataclass
class EvalReport:
    """Per-item records grouped by ``group_by`` fields; the matrix exists when grouped by (range, proportion)."""

    records: list
    group_by: tuple = ("range_m",)
    name: str = "report"
    meta: dict = field(default_factory=dict)

    def key(self, rec: Record) -> tuple:
        return tuple(getattr(rec, f) for f in self.group_by)

    def groups(self) -> dict:
        out = {}
        for rec in self.records:
            out.setdefault(self.key(rec), []).append(rec)
        return {k: out[k] for k in sorted(out)}

    def box(self, absolute: bool = False) -> dict:
        return {k: box_stats([r.abs_error if absolute else r.rel_error for r in recs])
                for k, recs in self.groups().items()}

    def mean_abs_error(self) -> float:
        return float(np.mean([r.abs_error for r in self.records]))

    @property
    def has_matrix(self) -> bool:
        return self.group_by == ("range_m", "trend_proportion")

    def matrix(self, absolute: bool = True):
        """(ranges, proportions, M) with M[i, j] the mean (absolute) relative error of that cell."""
        if not self.has_matrix:
            raise ValueError("matrix needs a report grouped by (range_m, trend_proportion)")
        groups = self.groups()
        ranges = sorted({k[0] for k in groups})
        props = sorted({k[1] for k in groups})
        m = np.full((len(ranges), len(props)), np.nan)
        for (a, p), recs in groups.items():
            errs = [r.abs_error if absolute else r.rel_error for r in recs]
            m[ranges.index(a), props.index(p)] = np.mean(errs)
        return ranges, props, m


def report_from_pairs(pairs, labels=None, name="stationary") -> EvalReport:
    """Report from (true range, predicted range) pairs, e.g. the output of evaluate_split."""
    recs = []
    for i, (y, yh) in enumerate(pairs):
        lab = labels[i] if labels is not None else None
        recs.append(Record(float(y), float(yh),
                           lab.trend_proportion if lab else 0.0, lab.seed if lab else 0,
                           lab.nonstat_type if lab else "stationary"))
    return EvalReport(recs, ("range_m",), name)


# ---------------------------------------------------------------------------
# benchmark sweeps


def oracle_predictor(kind: str = "spherical", **kwargs) -> Predictor:
    """Variogram-fitting baseline used in place of a trained model."""
    def predict(r: Realization) -> float:
        return oracle_range(r, kind, **kwargs)
    return predict


def _cache_path(cache_dir, grid, kind, a, p, seed):
    key = json.dumps([grid.to_dict(), kind, float(a), float(p), int(seed)], sort_keys=True)
    return Path(cache_dir) / f"{kind}_{hashlib.sha256(key.encode()).hexdigest()[:24]}.nsr"


def _realize(args):
    grid_d, kind, a, p, seed, cache_dir = args
    grid = GridSpec.from_dict(grid_d)
    if cache_dir is not None:
        path = _cache_path(cache_dir, grid, kind, a, p, seed)
        if path.exists():
            return read_realization(path)
    r = realization_for(grid, kind, a, p, seed)
    if cache_dir is not None:
        Path(cache_dir).mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(f".tmp{seed}")
        write_realization(r, tmp)
        tmp.replace(path)
    return r


def _sweep(predict: Predictor, grid, kind, settings, n_real, base_seed, cache_dir, workers):
    jobs = [(grid.to_dict(), kind, a, p, derive_seed(base_seed, i, j), cache_dir)
            for i, (a, p) in enumerate(settings) for j in range(n_real)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            reals = list(ex.map(_realize, jobs))
    else:
        reals = [_realize(j) for j in jobs]
    return [Record(r.label.range_m, float(predict(r)), r.label.trend_proportion, r.label.seed,
                   r.label.nonstat_type) for r in reals]


def type1_benchmark(predict: Predictor, grid: GridSpec, ranges=None, n_real: int = 20, base_seed: int = 0,
                    training_max: float | None = None, cache_dir=None, workers: int = 1) -> EvalReport:
    """Predict on type I realizations (range > domain/3), grouped by range."""
    ranges = default_ranges("type1", grid.extent / 1120.0) if ranges is None else [float(a) for a in ranges]
    if training_max is not None and min(ranges) <= training_max:
        raise ValueError(f"type I ranges must exceed the training maximum {training_max} m")
    recs = _sweep(predict, grid, "type1", dataset_settings("type1", ranges, ()), n_real, base_seed,
                  cache_dir, workers)
    return EvalReport(recs, ("range_m",), "type1",
                      {"ranges": ranges, "n_real": n_real, "base_seed": base_seed, "grid": grid.to_dict()})


def type2_benchmark(predict: Predictor, grid: GridSpec, ranges=None, proportions=None, n_real: int = 20,
                    base_seed: int = 0, cache_dir=None, workers: int = 1) -> EvalReport:
    """Predict over the (range x trend proportion) cross product; the report carries the error matrix."""
    ranges = default_ranges("type2", grid.extent / 1120.0) if ranges is None else [float(a) for a in ranges]
    proportions = [round(0.1 * i, 1) for i in range(10)] if proportions is None else [float(p) for p in proportions]
    if any(not 0 <= p <= 0.9 for p in proportions):
        raise ValueError("trend proportions must lie in [0, 0.9]")
    recs = _sweep(predict, grid, "type2", dataset_settings("type2", ranges, proportions), n_real, base_seed,
                  cache_dir, workers)
    return EvalReport(recs, ("range_m", "trend_proportion"), "type2",
                      {"ranges": ranges, "proportions": proportions, "n_real": n_real,
                       "base_seed": base_seed, "grid": grid.to_dict()})


def compare_models(report_a: EvalReport, report_b: EvalReport, n_boot: int = 1000, seed: int = 0) -> list[dict]:
    """Per group: mean |rel. error| of a minus that of b with a bootstrap 95% interval.

    Positive improvement means b is more accurate. Groups of equal size are
    resampled jointly (paired by position), others independently.
    """
    ga, gb = report_a.groups(), report_b.groups()
    if set(ga) != set(gb):
        raise ValueError(f"reports do not share grouping keys: only in a {sorted(set(ga) - set(gb))}, "
                         f"only in b {sorted(set(gb) - set(ga))}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 29]))
    rows = []
    for key in ga:
        ea = np.array([r.abs_error for r in ga[key]])
        eb = np.array([r.abs_error for r in gb[key]])
        ia = rng.integers(0, ea.size, size=(n_boot, ea.size))
        ib = ia if ea.size == eb.size else rng.integers(0, eb.size, size=(n_boot, eb.size))
        boot = ea[ia].mean(1) - eb[ib].mean(1)
        lo, hi = np.percentile(boot, [2.5, 97.5])
        rows.append({"group": list(key), "mean_abs_a": float(ea.mean()), "mean_abs_b": float(eb.mean()),
                     "improvement": float(ea.mean() - eb.mean()), "ci_low": float(lo), "ci_high": float(hi),
                     "n_a": int(ea.size), "n_b": int(eb.size)})
    return rows


# ---------------------------------------------------------------------------
# files


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


def _matrix_csv(ranges, props, m) -> str:
    return _csv_text(["range_m"] + [f"p={p!r}" for p in props],
                     [[a] + [float(x) for x in row] for a, row in zip(ranges, m)])


def read_matrix_csv(path):
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    props = [float(h[2:]) for h in rows[0][1:]]
    ranges = [float(r[0]) for r in rows[1:]]
    m = np.array([[float(x) for x in r[1:]] for r in rows[1:]], dtype=np.float64)
    return ranges, props, m


def emit_report(report: EvalReport, out_dir, comparison: list | None = None) -> list[Path]:
    """Write records.csv, groups.csv, matrix CSVs (when present) and summary.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    files["records.csv"] = _csv_text(
        RECORD_FIELDS, [[r.range_m, r.trend_proportion, r.seed, r.nonstat_type, r.predicted, r.rel_error]
                        for r in report.records])
    rows = []
    for signed_abs, boxes in (("signed", report.box()), ("absolute", report.box(absolute=True))):
        for key, b in boxes.items():
            rows.append(list(key) + [signed_abs, b["n"], b["mean"], b["q1"], b["median"], b["q3"],
                                     b["whisker_low"], b["whisker_high"],
                                     ";".join(repr(x) for x in b["outliers"])])
    files["groups.csv"] = _csv_text(list(report.group_by) + ["error", "n", "mean", "q1", "median", "q3",
                                                             "whisker_low", "whisker_high", "outliers"], rows)
    summary = {"name": report.name, "group_by": list(report.group_by), "n_records": len(report.records),
               "mean_abs_rel_error": report.mean_abs_error() if report.records else None,
               "mean_rel_error": float(np.mean([r.rel_error for r in report.records])) if report.records else None,
               "meta": report.meta}
    if report.has_matrix:
        ranges, props, m = report.matrix()
        files["matrix.csv"] = _matrix_csv(ranges, props, m)
        files["matrix_signed.csv"] = _matrix_csv(*report.matrix(absolute=False))
    if comparison is not None:
        files["comparison.csv"] = _csv_text(
            ["group", "mean_abs_a", "mean_abs_b", "improvement", "ci_low", "ci_high", "n_a", "n_b"],
            [[";".join(repr(g) for g in c["group"]), c["mean_abs_a"], c["mean_abs_b"], c["improvement"],
              c["ci_low"], c["ci_high"], c["n_a"], c["n_b"]] for c in comparison])
        summary["comparison"] = comparison
    files["summary.json"] = json.dumps(summary, indent=1, sort_keys=True) + "\n"
    paths = []
    for name, text in files.items():
        p = out / name
        p.write_text(text)
        paths.append(p)
    return paths
