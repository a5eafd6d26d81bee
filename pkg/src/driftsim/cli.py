"""Command-line front end.

Usage::

    driftsim joint --config c.toml --seeds 1,2,3 --out runs/
    driftsim analyze --out runs/
    driftsim --dump-defaults > c.toml

Exit codes: 0 success, 2 configuration error, 3 runtime error, 4 calibration infeasible.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Sequence

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import __version__
from .analysis import (
    SCHEMA_VERSION,
    correlate_cd_cf,
    curve_from_rows,
    dump_json,
    export_landscape,
    find_bump,
    load_landscape,
    read_rows_csv,
    write_rows_csv,
)
from .corruptions import KINDS, calibrate_transform
from .errors import CalibrationInfeasible, DriftSimError, InvalidConfig
from .experiments import (
    DropCurve,
    cf_feasibility_check,
    pretrained_model,
    resolve_workers,
    run_ablation,
    run_cd,
    run_cf,
    run_joint,
)
from .federation import FederationConfig, desk_defaults, get_federation

log = logging.getLogger("driftsim")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_INFEASIBLE = 0, 2, 3, 4
COMMANDS = ("cd", "cf", "joint", "ablation", "calibrate", "analyze")


@dataclass(frozen=True)
class AblationSettings:
    kinds: tuple[str, ...] = KINDS
    rounds_cd: int = 0  # 0 keeps the federation value
    rounds_cf: int = 0


@dataclass(frozen=True)
class CalibrationSettings:
    kind: str = "occlusion_overlay"
    target: float = 0.2
    tol: float = 0.02
    opacity: float = 1.0
    seed: int = 1


@dataclass(frozen=True)
class RunSettings:
    seeds: tuple[int, ...] = (1, 2, 3, 4, 5)
    workers: int = 0  # 0 defers to DRIFT_WORKERS, then 1
    out: str = "runs"


@dataclass(frozen=True)
class RunConfig:
    federation: FederationConfig = field(default_factory=FederationConfig)
    run: RunSettings = field(default_factory=RunSettings)
    ablation: AblationSettings = field(default_factory=AblationSettings)
    calibrate: CalibrationSettings = field(default_factory=CalibrationSettings)

    def echo(self) -> dict:
        """Resolved config as embedded in outputs; worker count and paths are left out
        because they must not change results."""
        return {
            "federation": self.federation.to_dict(),
            "seeds": list(self.run.seeds),
            "ablation": {"kinds": list(self.ablation.kinds), "rounds_cd": self.ablation.rounds_cd,
                         "rounds_cf": self.ablation.rounds_cf},
            "calibrate": {f.name: getattr(self.calibrate, f.name) for f in fields(CalibrationSettings)},
        }


SECTIONS = {
    "federation": FederationConfig,
    "run": RunSettings,
    "ablation": AblationSettings,
    "calibrate": CalibrationSettings,
}
_TUPLE_KEYS = {"hidden", "kinds", "severity_table", "seeds"}


def _coerce(section: str, key: str, value: Any, default: Any) -> Any:
    where = f"{section}.{key}"
    if key in _TUPLE_KEYS:
        if not isinstance(value, list):
            raise InvalidConfig(f"config key {where!r} must be a list")
        return tuple(value)
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise InvalidConfig(f"config key {where!r} has the wrong type ({type(value).__name__})")
    return value


def parse_config(text: str) -> RunConfig:
    """Build a RunConfig from TOML text; unknown sections or keys are rejected."""
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise InvalidConfig(f"cannot parse config: {exc}") from exc
    for name in doc:
        if name not in SECTIONS:
            raise InvalidConfig(f"unknown config section {name!r}")
        if not isinstance(doc[name], dict):
            raise InvalidConfig(f"config key {name!r} must be a section")
    values: dict[str, dict] = {}
    for name, cls in SECTIONS.items():
        section = doc.get(name, {})
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(section) - set(known))
        if unknown:
            raise InvalidConfig(f"unknown config key {name + '.' + unknown[0]!r}")
        base = desk_defaults(section.get("task", "classification")) if cls is FederationConfig else cls()
        values[name] = {k: _coerce(name, k, v, getattr(base, k)) for k, v in section.items()}
    task = values["federation"].pop("task", "classification")
    fed = desk_defaults(task, **values["federation"])
    return RunConfig(
        fed,
        RunSettings(**values["run"]),
        AblationSettings(**values["ablation"]),
        CalibrationSettings(**values["calibrate"]),
    )


def _toml_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    if isinstance(v, str):
        return json.dumps(v)
    return repr(v)


def dump_defaults() -> str:
    cfg = RunConfig()
    lines = ["# driftsim defaults; any key may be omitted",
             "# task = \"segmentation\" switches to n_samples=1000, lr=0.5, hidden=[16] unless set here"]
    for name in SECTIONS:
        lines.append(f"\n[{name}]")
        obj = getattr(cfg, name)
        for f in fields(obj):
            v = getattr(obj, f.name)
            if v is None:
                lines.append(f"# {f.name} = [six values, level 0 first]")
            else:
                lines.append(f"{f.name} = {_toml_value(v)}")
    return "\n".join(lines) + "\n"


def _parse_seeds(text: str) -> tuple[int, ...]:
    try:
        seeds = tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError as exc:
        raise InvalidConfig(f"--seeds expects comma-separated integers, got {text!r}") from exc
    if not seeds or any(s < 0 for s in seeds):
        raise InvalidConfig(f"--seeds needs at least one non-negative seed, got {text!r}")
    return seeds


def resolve(args: argparse.Namespace) -> RunConfig:
    """Config file first, then command-line overrides."""
    if args.config:
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise InvalidConfig(f"cannot read config {args.config}: {exc}") from exc
        cfg = parse_config(text)
    else:
        cfg = RunConfig()
    run, fed, abl = cfg.run, cfg.federation, cfg.ablation
    if args.seeds:
        run = replace(run, seeds=_parse_seeds(args.seeds))
    if args.workers is not None:
        run = replace(run, workers=args.workers)
    if args.out:
        run = replace(run, out=args.out)
    if args.rehearsal is not None:
        fed = replace(fed, rehearsal_fraction=args.rehearsal)
    if args.kinds:
        kinds = tuple(k.strip() for k in args.kinds.split(",") if k.strip())
        if args.command == "ablation":
            abl = replace(abl, kinds=kinds)
        else:
            fed = replace(fed, kinds=kinds)
    for k in abl.kinds:
        if k not in KINDS:
            raise InvalidConfig(f"unknown corruption kind {k!r} in ablation.kinds")
    if not run.seeds:
        raise InvalidConfig("run.seeds must not be empty")
    if run.workers < 0:
        raise InvalidConfig("run.workers must be >= 0")
    return RunConfig(fed, run, abl, cfg.calibrate)


def _workers(cfg: RunConfig) -> int:
    return resolve_workers(cfg.run.workers or None)


def _document(cfg: RunConfig, experiment: str, **body) -> dict:
    return {"schema": SCHEMA_VERSION, "tool": "driftsim", "version": __version__,
            "experiment": experiment, **body, "config": cfg.echo()}


def _curve_document(cfg: RunConfig, name: str, curve: DropCurve) -> dict:
    return _document(
        cfg, name,
        axis=curve.axis,
        x=list(curve.x),
        seeds=list(curve.seeds),
        per_seed={"final_metric": curve.metrics.tolist(), "delta_rel": curve.delta_rel.tolist(),
                  "delta_abs": curve.delta_abs.tolist()},
        mean={"delta_rel": curve.mean_delta_rel.tolist(), "delta_abs": curve.mean_delta_abs.tolist()},
    )


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.run.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    return out


def cmd_curve(cfg: RunConfig, name: str) -> int:
    runner = run_cd if name == "cd" else run_cf
    curve = runner(cfg.federation, cfg.run.seeds, workers=_workers(cfg))
    out = _out_dir(cfg)
    write_rows_csv(out / f"{name}.csv", curve.rows(name))
    dump_json(out / f"{name}.json", _curve_document(cfg, name, curve))
    print(f"{name}: mean delta_rel " + " ".join(f"{v:.4f}" for v in curve.mean_delta_rel))
    return EXIT_OK


def cmd_joint(cfg: RunConfig) -> int:
    grid = run_joint(cfg.federation, cfg.run.seeds, workers=_workers(cfg))
    grid.config = cfg.echo()
    out = _out_dir(cfg)
    export_landscape(grid, out / "grid.json", out / "landscape.csv")
    write_rows_csv(out / "grid.csv", grid.rows("joint"))
    print(f"joint: {len(grid.seeds)} seeds x {grid.shape[0]}x{grid.shape[1]} cells written to {out}")
    return EXIT_OK


def cmd_ablation(cfg: RunConfig) -> int:
    abl = cfg.ablation
    res = run_ablation(cfg.federation, cfg.run.seeds, abl.kinds, abl.rounds_cd or None, abl.rounds_cf or None,
                       workers=_workers(cfg))
    out = _out_dir(cfg)
    rows = [{"kind": k, "cd_delta_rel": v["cd"], "cf_delta_rel": v["cf"]} for k, v in res.items()]
    write_rows_csv(out / "ablation.csv", rows, ("kind", "cd_delta_rel", "cf_delta_rel"))
    dump_json(out / "ablation.json", _document(cfg, "ablation", results=[{"kind": k, **v} for k, v in res.items()]))
    for r in rows:
        print(f"{r['kind']:>18}  cd {r['cd_delta_rel']:.4f}  cf {r['cf_delta_rel']:.4f}")
    return EXIT_OK


def cmd_calibrate(cfg: RunConfig) -> int:
    cal, fcfg = cfg.calibrate, cfg.federation
    model = pretrained_model(fcfg, cal.seed)
    test = get_federation(fcfg, cal.seed).test
    spec, drop = calibrate_transform(model, test, cal.kind, cal.target, cal.tol, opacity=cal.opacity, salt=cal.seed)
    report = cf_feasibility_check(fcfg, spec, cal.seed)
    doc = _document(cfg, "calibrate", spec=spec.to_dict(), measured_drop=drop, feasibility=report.to_dict())
    dump_json(_out_dir(cfg) / "calibrate.json", doc)
    print(json.dumps({"spec": spec.to_dict(), "measured_drop": drop, "feasibility": report.to_dict()}, indent=1))
    if not report.passes:
        print(f"error: {cal.kind} at coverage {spec.coverage:.4f} cannot emulate forgetting "
              f"(drop {report.drop_after_retrain:.4f}, order switched: {report.order_switched})", file=sys.stderr)
        return EXIT_INFEASIBLE
    return EXIT_OK


def cmd_analyze(cfg: RunConfig, args: argparse.Namespace) -> int:
    out = Path(cfg.run.out)
    cd_path = Path(args.cd) if args.cd else out / "cd.csv"
    cf_path = Path(args.cf) if args.cf else out / "cf.csv"
    cd = curve_from_rows(read_rows_csv(cd_path), "ratio")
    cf = curve_from_rows(read_rows_csv(cf_path), "severity")
    result: dict = {"schema": SCHEMA_VERSION, "tool": "driftsim", "version": __version__,
                    "experiment": "analyze", "correlation": correlate_cd_cf(cd, cf).to_dict()}
    grid_path = Path(args.grid) if args.grid else out / "grid.json"
    if args.grid or grid_path.exists():
        result["bump"] = find_bump(load_landscape(grid_path)).to_dict()
    result["config"] = cfg.echo()
    text = json.dumps(result, indent=1, sort_keys=True)
    print(text)
    if out.is_dir():
        (out / "analysis.json").write_text(text + "\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config file")
    common.add_argument("--seeds", help="comma-separated seeds, e.g. 1,2,3")
    common.add_argument("--out", help="output directory")
    common.add_argument("--workers", type=int, help="worker processes (default: $DRIFT_WORKERS or 1)")
    common.add_argument("--rehearsal", type=float, help="clean rehearsal fraction per client")
    common.add_argument("--kinds", help="comma-separated corruption kinds")

    p = argparse.ArgumentParser(prog="driftsim", description=__doc__.split("\n")[0])
    p.add_argument("--dump-defaults", action="store_true", help="print the default config and exit")
    p.add_argument("--version", action="version", version=f"driftsim {__version__}")
    sub = p.add_subparsers(dest="command")
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common])
        if name == "analyze":
            sp.add_argument("--cd", help="CD csv (default: OUT/cd.csv)")
            sp.add_argument("--cf", help="CF csv (default: OUT/cf.csv)")
            sp.add_argument("--grid", help="grid JSON (default: OUT/grid.json if present)")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.dump_defaults:
        sys.stdout.write(dump_defaults())
        return EXIT_OK
    if not args.command:
        parser.print_usage(sys.stderr)
        print("error: a command is required", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        cfg = resolve(args)
        if args.command in ("cd", "cf"):
            return cmd_curve(cfg, args.command)
        if args.command == "joint":
            return cmd_joint(cfg)
        if args.command == "ablation":
            return cmd_ablation(cfg)
        if args.command == "calibrate":
            return cmd_calibrate(cfg)
        return cmd_analyze(cfg, args)
    except InvalidConfig as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CalibrationInfeasible as exc:
        print(f"calibration infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (DriftSimError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
