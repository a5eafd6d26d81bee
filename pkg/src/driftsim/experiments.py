"""CD sweep, CF sweep, joint CD x CF grid, ablation and the CF feasibility check.

RNG discipline: every training phase draws from a stream keyed by
``(seed, phase)``.  The ratio and severity indices deliberately do not enter
the stream, so all cells of one seed see the same client sampling and batch
order and differ only through the shift they apply (common random numbers).
A cell's result therefore depends on nothing but its own coordinates, and
cells can run in any order or in parallel.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .corruptions import MAX_LEVEL, CorruptionSpec
from .errors import DivergenceError, ExperimentAborted, InvalidConfig
from .federation import FederationConfig, ShiftPlan, get_federation
from .nn_core import ModelParams

log = logging.getLogger(__name__)

RATIOS = tuple(i / 10 for i in range(11))
LEVELS = tuple(range(MAX_LEVEL + 1))
PHASE_CD, PHASE_CF = 1, 2


def phase_stream(seed: int, phase: int) -> tuple[int, int]:
    return (int(seed), phase)


def cell_stream(seed: int, ratio_idx: int, severity_idx: int) -> tuple[tuple[int, int], tuple[int, int]]:
    """Streams used by a grid cell: (CD phase, CF phase).  Indices are accepted
    for documentation only -- see the module docstring."""
    del ratio_idx, severity_idx
    return phase_stream(seed, PHASE_CD), phase_stream(seed, PHASE_CF)


@dataclass
class DropCurve:
    axis: str  # "ratio" or "severity"
    x: tuple[float, ...]
    seeds: tuple[int, ...]
    metrics: np.ndarray  # [seeds, points] final clean-test metric

    @property
    def baseline(self) -> np.ndarray:
        return self.metrics[:, :1]

    @property
    def delta_abs(self) -> np.ndarray:
        return self.baseline - self.metrics

    @property
    def delta_rel(self) -> np.ndarray:
        return (self.baseline - self.metrics) / self.baseline

    @property
    def mean_delta_rel(self) -> np.ndarray:
        return self.delta_rel.mean(axis=0)

    @property
    def mean_delta_abs(self) -> np.ndarray:
        return self.delta_abs.mean(axis=0)

    def rows(self, experiment: str) -> list[dict]:
        out = []
        for si, seed in enumerate(self.seeds):
            for pi, xv in enumerate(self.x):
                out.append(
                    {
                        "experiment": experiment,
                        "seed": seed,
                        "ratio": xv if self.axis == "ratio" else 0.0,
                        "severity": xv if self.axis == "severity" else 0,
                        "final_metric": float(self.metrics[si, pi]),
                        "delta_rel": float(self.delta_rel[si, pi]),
                        "delta_abs": float(self.delta_abs[si, pi]),
                    }
                )
        return out


@dataclass
class LandscapeGrid:
    ratios: tuple[float, ...]
    levels: tuple[int, ...]
    seeds: tuple[int, ...]
    metrics: np.ndarray  # [seeds, ratios, levels]
    config: dict = field(default_factory=dict)

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.ratios), len(self.levels)

    @property
    def delta_abs(self) -> np.ndarray:
        return self.metrics[:, :1, :1] - self.metrics

    @property
    def delta_rel(self) -> np.ndarray:
        base = self.metrics[:, :1, :1]
        return (base - self.metrics) / base

    @property
    def mean_metric(self) -> np.ndarray:
        return self.metrics.mean(axis=0)

    @property
    def mean_delta_rel(self) -> np.ndarray:
        return self.delta_rel.mean(axis=0)

    @property
    def mean_delta_abs(self) -> np.ndarray:
        return self.delta_abs.mean(axis=0)

    def rows(self, experiment: str = "joint") -> list[dict]:
        out = []
        rel, ab = self.delta_rel, self.delta_abs
        for si, seed in enumerate(self.seeds):
            for ri, r in enumerate(self.ratios):
                for li, lvl in enumerate(self.levels):
                    out.append(
                        {
                            "experiment": experiment,
                            "seed": seed,
                            "ratio": r,
                            "severity": lvl,
                            "final_metric": float(self.metrics[si, ri, li]),
                            "delta_rel": float(rel[si, ri, li]),
                            "delta_abs": float(ab[si, ri, li]),
                        }
                    )
        return out


@dataclass(frozen=True)
class _Unit:
    """One seed x shifted-ratio work item: CD phase, then each CF severity."""

    cfg: FederationConfig
    seed: int
    ratio: float
    levels: tuple[int, ...]


def _severity(fed, level: int) -> CorruptionSpec:
    return fed.default_severity(level)


def _run_unit(unit: _Unit) -> tuple[float, tuple[float, ...]]:
    with threadpool_limits(1):
        cfg, seed = unit.cfg, unit.seed
        fed = get_federation(cfg, seed)
        cd_stream, cf_stream = cell_stream(seed, 0, 0)
        try:
            plan = ShiftPlan.build(unit.ratio, _severity(fed, MAX_LEVEL), cfg.total_clients, seed)
            ckpt, hist = fed.run(plan, cfg.rounds_cd, fed.init_model(), cd_stream)
            finals = []
            for lvl in unit.levels:
                plan2 = ShiftPlan.build(1.0, _severity(fed, lvl), cfg.total_clients, seed)
                _, h2 = fed.run(plan2, cfg.rounds_cf, ckpt, cf_stream, round_offset=cfg.rounds_cd)
                finals.append(h2.final)
        except DivergenceError as exc:
            raise DivergenceError(f"seed={seed} ratio={unit.ratio}: {exc}", exc.round_idx) from exc
        return hist.final, tuple(finals)


def resolve_workers(workers: int | None) -> int:
    if workers is None:
        workers = int(os.environ.get("DRIFT_WORKERS", "1"))
    if workers < 1:
        raise InvalidConfig(f"worker count must be >= 1, got {workers}")
    return workers


def _execute(units: Sequence[_Unit], workers: int | None) -> list[tuple[float, tuple[float, ...]]]:
    """Run units, keyed by position; results never depend on completion order."""
    workers = min(resolve_workers(workers), max(len(units), 1))
    results: list = []
    completed: list[tuple[int, float]] = []

    def record(i: int, res) -> None:
        u = units[i]
        results.append(res)
        completed.append((u.seed, u.ratio))
        log.info("cell %d/%d seed=%d ratio=%.1f done", i + 1, len(units), u.seed, u.ratio)

    try:
        if workers == 1:
            for i, u in enumerate(units):
                record(i, _run_unit(u))
        else:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                for i, res in enumerate(pool.map(_run_unit, units)):
                    record(i, res)
    except DivergenceError as exc:
        raise ExperimentAborted(f"experiment aborted: {exc}", completed) from exc
    return results


def _seeds(seeds: Iterable[int]) -> tuple[int, ...]:
    seeds = tuple(int(s) for s in seeds)
    if not seeds:
        raise InvalidConfig("at least one seed is required")
    return seeds


def run_cd(
    cfg: FederationConfig, seeds: Iterable[int], ratios: Sequence[float] = RATIOS, workers: int | None = None
) -> DropCurve:
    """Final clean metric after ``rounds_cd`` rounds with a share of clients at max severity."""
    seeds = _seeds(seeds)
    if ratios[0] != 0.0:
        raise InvalidConfig("the ratio grid must start at 0 (the self-baseline)")
    units = [_Unit(cfg, s, r, ()) for s in seeds for r in ratios]
    res = _execute(units, workers)
    metrics = np.array([r[0] for r in res]).reshape(len(seeds), len(ratios))
    return DropCurve("ratio", tuple(ratios), seeds, metrics)


def run_cf(
    cfg: FederationConfig, seeds: Iterable[int], levels: Sequence[int] = LEVELS, workers: int | None = None
) -> DropCurve:
    """Clean pretraining, then ``rounds_cf`` rounds with every client shifted."""
    seeds = _seeds(seeds)
    if levels[0] != 0:
        raise InvalidConfig("the severity grid must start at 0 (the self-baseline)")
    units = [_Unit(cfg, s, 0.0, tuple(levels)) for s in seeds]
    res = _execute(units, workers)
    metrics = np.array([r[1] for r in res])
    return DropCurve("severity", tuple(float(lv) for lv in levels), seeds, metrics)


def run_joint(
    cfg: FederationConfig,
    seeds: Iterable[int],
    ratios: Sequence[float] = RATIOS,
    levels: Sequence[int] = LEVELS,
    workers: int | None = None,
) -> LandscapeGrid:
    """Every (ratio, severity) cell: CD phase at max severity, then CF phase at the cell severity."""
    seeds = _seeds(seeds)
    if ratios[0] != 0.0 or levels[0] != 0:
        raise InvalidConfig("grids must start at ratio 0 and severity 0")
    units = [_Unit(cfg, s, r, tuple(levels)) for s in seeds for r in ratios]
    res = _execute(units, workers)
    metrics = np.array([r[1] for r in res]).reshape(len(seeds), len(ratios), len(levels))
    return LandscapeGrid(tuple(ratios), tuple(levels), seeds, metrics, cfg.to_dict())


def run_ablation(
    cfg: FederationConfig,
    seeds: Iterable[int],
    kinds: Sequence[str],
    rounds_cd: int | None = None,
    rounds_cf: int | None = None,
    workers: int | None = None,
) -> dict[str, dict[str, float]]:
    """Seed-mean relative drop per kind: CD at ratio 1.0 and CF at the top level."""
    if not kinds:
        raise InvalidConfig("ablation needs at least one kind")
    seeds = _seeds(seeds)
    out = {}
    for kind in kinds:
        sub = replace(
            cfg,
            kinds=(kind,),
            rounds_cd=rounds_cd or cfg.rounds_cd,
            rounds_cf=rounds_cf or cfg.rounds_cf,
        )
        cd = run_cd(sub, seeds, ratios=(0.0, 1.0), workers=workers)
        cf = run_cf(sub, seeds, levels=(0, MAX_LEVEL), workers=workers)
        out[kind] = {"cd": float(cd.mean_delta_rel[-1]), "cf": float(cf.mean_delta_rel[-1])}
    return out


@dataclass(frozen=True)
class FeasibilityReport:
    drop_after_retrain: float
    order_switched: bool
    passes: bool
    clean_before: float
    shifted_before: float
    clean_after: float
    shifted_after: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def cf_feasibility_check(
    cfg: FederationConfig, transform: CorruptionSpec, seed: int, min_drop: float = 0.05
) -> FeasibilityReport:
    """Can ``transform`` emulate forgetting?

    Pretrain clean for ``rounds_cd`` rounds, then train the same number of
    rounds with every client shifted.  Passes when the clean-test metric
    drops by at least ``min_drop`` (relative) and the clean/shifted test
    ordering flips: clean ahead before the shift, shifted ahead after.
    """
    with threadpool_limits(1):
        fed = get_federation(cfg, seed)
        cd_stream, cf_stream = cell_stream(seed, 0, 0)
        pre, _ = fed.run(ShiftPlan.clean(), cfg.rounds_cd, fed.init_model(), cd_stream)
        clean_before = fed.evaluate(pre)
        shifted_before = fed.evaluate(pre, transform)
        plan = ShiftPlan.build(1.0, transform, cfg.total_clients, seed)
        post, _ = fed.run(plan, cfg.rounds_cd, pre, cf_stream, round_offset=cfg.rounds_cd)
        clean_after = fed.evaluate(post)
        shifted_after = fed.evaluate(post, transform)
    drop = (clean_before - clean_after) / clean_before
    switched = bool(clean_before > shifted_before and shifted_after > clean_after)
    return FeasibilityReport(
        float(drop), switched, bool(drop >= min_drop and switched),
        clean_before, shifted_before, clean_after, shifted_after,
    )


def pretrained_model(cfg: FederationConfig, seed: int) -> ModelParams:
    """Clean federation after ``rounds_cd`` rounds (the calibration reference model)."""
    with threadpool_limits(1):
        fed = get_federation(cfg, seed)
        params, _ = fed.run(ShiftPlan.clean(), cfg.rounds_cd, fed.init_model(), phase_stream(seed, PHASE_CD))
    return params

