"""Correlation between CD and CF drop curves, bump detection and result I/O."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .errors import InvalidInput, RangeError, ShapeError, UndefinedCorrelation
from .experiments import DropCurve, LandscapeGrid

SCHEMA_VERSION = 1
CSV_FIELDS = ("experiment", "seed", "ratio", "severity", "final_metric", "delta_rel", "delta_abs")


def _pair(x, y) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ShapeError(f"series lengths differ: {x.size} vs {y.size}")
    if x.size < 3:
        raise ShapeError("correlation needs at least 3 points")
    return x, y


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    x, y = _pair(x, y)
    if np.ptp(x) == 0.0 or np.ptp(y) == 0.0:
        raise UndefinedCorrelation("correlation is undefined for a constant series")
    xc = x - x.mean()
    yc = y - y.mean()
    # rescale so the products below cannot underflow for tiny spreads
    xc = xc / np.abs(xc).max()
    yc = yc / np.abs(yc).max()
    den = np.sqrt(np.dot(xc, xc) * np.dot(yc, yc))
    if not den > 0.0:
        raise UndefinedCorrelation("correlation is undefined for a constant series")
    r = float(np.dot(xc, yc) / den)
    return min(1.0, max(-1.0, r))


def average_ranks(values: Sequence[float]) -> np.ndarray:
    """1-based ranks; tied values share the mean of the ranks they span."""
    v = np.asarray(values, dtype=np.float64)
    order = np.argsort(v, kind="mergesort")
    ranks = np.empty(v.size)
    sorted_v = v[order]
    i = 0
    while i < v.size:
        j = i
        while j + 1 < v.size and sorted_v[j + 1] == sorted_v[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    x, y = _pair(x, y)
    return pearson(average_ranks(x), average_ranks(y))


def interpolate_linear(levels: Sequence[float], values: Sequence[float], queries: Sequence[float]) -> np.ndarray:
    """Piecewise-linear interpolation; no extrapolation outside the knots."""
    lv = np.asarray(levels, dtype=np.float64)
    vals = np.asarray(values, dtype=np.float64)
    q = np.asarray(queries, dtype=np.float64)
    if lv.shape != vals.shape or lv.size < 2:
        raise ShapeError("need at least two knots with one value each")
    if np.any(np.diff(lv) <= 0):
        raise InvalidInput("knots must be strictly increasing")
    if q.size and (q.min() < lv[0] or q.max() > lv[-1]):
        raise RangeError(f"queries must lie within [{lv[0]}, {lv[-1]}]")
    seg = np.clip(np.searchsorted(lv, q, side="right") - 1, 0, lv.size - 2)
    x0, x1 = lv[seg], lv[seg + 1]
    t = (q - x0) / (x1 - x0)
    out = vals[seg] + t * (vals[seg + 1] - vals[seg])
    # exact at knots, including the last one
    at_knot = q == x1
    out[at_knot] = vals[seg + 1][at_knot]
    return out


@dataclass(frozen=True)
class CorrelationResult:
    pearson: float
    spearman: float
    slope: float  # least-squares m in delta_cd ~ m * delta_cf + intercept
    intercept: float
    n: int

    def to_dict(self) -> dict:
        return asdict(self)


def _normalised(x: Sequence[float]) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return (x - x[0]) / (x[-1] - x[0])


def correlate_cd_cf(cd: DropCurve, cf: DropCurve) -> CorrelationResult:
    """Resample the CF curve onto the CD ratio grid and correlate the seed-mean drops."""
    if cd.axis != "ratio" or cf.axis != "severity":
        raise InvalidInput("expected a ratio-axis CD curve and a severity-axis CF curve")
    x_cd = _normalised(cd.x)
    d_cd = cd.mean_delta_rel
    d_cf = interpolate_linear(_normalised(cf.x), cf.mean_delta_rel, x_cd)
    if not np.any(d_cd) or not np.any(d_cf):
        raise UndefinedCorrelation("a drop curve is identically zero")
    r = pearson(d_cd, d_cf)
    rho = spearman(d_cd, d_cf)
    cf_c = d_cf - d_cf.mean()
    slope = float(np.dot(cf_c, d_cd - d_cd.mean()) / np.dot(cf_c, cf_c))
    intercept = float(d_cd.mean() - slope * d_cf.mean())
    return CorrelationResult(r, rho, slope, intercept, int(d_cd.size))


@dataclass(frozen=True)
class BumpReport:
    found: bool
    ratio: float | None = None
    severity: float | None = None
    peak_metric: float | None = None
    improvement_vs_pure_cd: float | None = None  # percent, vs the same-ratio severity-0 cell
    improvement_vs_pure_cf: float | None = None  # percent, vs the ratio-0 same-severity cell
    per_seed_found: tuple[bool, ...] = ()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_seed_found"] = list(self.per_seed_found)
        return d


def _bump_cell(m: np.ndarray) -> tuple[int, int] | None:
    best = None
    for ri in range(1, m.shape[0] - 1):
        for si in range(1, m.shape[1] - 1):
            v = m[ri, si]
            if v > m[ri, 0] and v > m[0, si] and (best is None or v > m[best]):
                best = (ri, si)
    return best


def find_bump(grid: LandscapeGrid) -> BumpReport:
    """Best interior cell that beats both its pure-CD and pure-CF edge cells."""
    metrics = np.asarray(grid.metrics, dtype=np.float64)
    if metrics.ndim != 3 or metrics.shape[1:] != grid.shape or not np.all(np.isfinite(metrics)):
        raise InvalidInput("bump detection needs a complete, finite grid")
    per_seed = tuple(_bump_cell(m) is not None for m in metrics)
    mean = metrics.mean(axis=0)
    cell = _bump_cell(mean)
    if cell is None:
        return BumpReport(False, per_seed_found=per_seed)
    ri, si = cell
    peak = float(mean[ri, si])
    return BumpReport(
        True,
        ratio=float(grid.ratios[ri]),
        severity=float(grid.levels[si]),
        peak_metric=peak,
        improvement_vs_pure_cd=100.0 * (peak - mean[ri, 0]) / mean[ri, 0],
        improvement_vs_pure_cf=100.0 * (peak - mean[0, si]) / mean[0, si],
        per_seed_found=per_seed,
    )


# --- result files -----------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".17g")


def write_rows_csv(path: str | Path, rows: Sequence[dict], fields: Sequence[str] = CSV_FIELDS) -> None:
    path = Path(path)
    try:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(fields)
            for row in rows:
                wr.writerow([row[f] if isinstance(row[f], str) else _fmt(row[f]) for f in fields])
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def read_rows_csv(path: str | Path) -> list[dict]:
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc}") from exc
    missing = set(CSV_FIELDS) - set(rows[0] if rows else CSV_FIELDS)
    if missing:
        raise InvalidInput(f"{path}: missing columns {sorted(missing)}")
    return rows


def curve_from_rows(rows: Sequence[dict], axis: str) -> DropCurve:
    """Rebuild a DropCurve from CSV rows of a single experiment."""
    col = "ratio" if axis == "ratio" else "severity"
    seeds = sorted({int(r["seed"]) for r in rows})
    xs = sorted({float(r[col]) for r in rows})
    table = {(int(r["seed"]), float(r[col])): float(r["final_metric"]) for r in rows}
    if len(table) != len(seeds) * len(xs):
        raise InvalidInput("CSV does not hold a complete seed x point table")
    metrics = np.array([[table[(s, x)] for x in xs] for s in seeds])
    return DropCurve(axis, tuple(xs), tuple(seeds), metrics)


def grid_document(grid: LandscapeGrid) -> dict:
    return {
        "schema": SCHEMA_VERSION,
        "tool": "driftsim",
        "version": __version__,
        "experiment": "joint",
        "axes": {"ratio": list(grid.ratios), "severity": list(grid.levels)},
        "seeds": list(grid.seeds),
        "per_seed": {
            "final_metric": grid.metrics.tolist(),
            "delta_rel": grid.delta_rel.tolist(),
            "delta_abs": grid.delta_abs.tolist(),
        },
        "mean": {
            "final_metric": grid.mean_metric.tolist(),
            "delta_rel": grid.mean_delta_rel.tolist(),
            "delta_abs": grid.mean_delta_abs.tolist(),
        },
        "config": grid.config,
    }


def dump_json(path: str | Path, doc: dict) -> None:
    path = Path(path)
    try:
        path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def export_landscape(grid: LandscapeGrid, path: str | Path, long_csv: str | Path | None = None) -> tuple[Path, Path]:
    """Write the JSON grid document and a long-format (ratio, severity, mean_delta) table."""
    path = Path(path)
    long_csv = Path(long_csv) if long_csv is not None else path.with_name(path.stem + "_long.csv")
    dump_json(path, grid_document(grid))
    mean = grid.mean_delta_rel
    rows = [
        {"ratio": r, "severity": lvl, "mean_delta": float(mean[ri, li])}
        for ri, r in enumerate(grid.ratios)
        for li, lvl in enumerate(grid.levels)
    ]
    write_rows_csv(long_csv, rows, ("ratio", "severity", "mean_delta"))
    return path, long_csv


def load_landscape(path: str | Path) -> LandscapeGrid:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InvalidInput(f"cannot read grid document {path}: {exc}") from exc
    if doc.get("schema") != SCHEMA_VERSION:
        raise InvalidInput(f"{path}: unsupported schema {doc.get('schema')!r}")
    return LandscapeGrid(
        tuple(doc["axes"]["ratio"]),
        tuple(doc["axes"]["severity"]),
        tuple(doc["seeds"]),
        np.array(doc["per_seed"]["final_metric"], dtype=np.float64),
        doc.get("config", {}),
    )
