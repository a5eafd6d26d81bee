"""Shared desk-default experiment runs and the acceptance report collector."""

import os
import time

import pytest

from driftsim.experiments import run_cd, run_cf, run_joint
from driftsim.federation import FederationConfig

SEEDS5 = (1, 2, 3, 4, 5)
SEEDS3 = (1, 2, 3)
WORKERS = max(1, min(4, os.cpu_count() or 1))

_REPORT: dict[int, tuple[bool, str]] = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    _REPORT[criterion] = (bool(ok), detail)
    print(f"criterion {criterion:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not _REPORT:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_REPORT):
        ok, detail = _REPORT[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def desk_cfg():
    return FederationConfig()


@pytest.fixture(scope="session")
def cd_curve(desk_cfg):
    return run_cd(desk_cfg, SEEDS5, workers=WORKERS)


@pytest.fixture(scope="session")
def cf_curve(desk_cfg):
    return run_cf(desk_cfg, SEEDS5, workers=WORKERS)


@pytest.fixture(scope="session")
def timed_joint(desk_cfg):
    t0 = time.perf_counter()
    grid = run_joint(desk_cfg, SEEDS3, workers=WORKERS)
    return grid, time.perf_counter() - t0
