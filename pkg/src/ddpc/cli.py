"""Command-line interface: ``ddpc run | compare | validate``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import COLUMN_NAMES, CONTROLLER_TYPES, ExperimentConfig, load_config
from .errors import ConfigError, ControllerError, PersistencyError
from .harness import (METRIC_LABELS, RunResult, _csv_text, _fmt, atomic_write_text,
                      offline_excitation, run_closed_loop, write_run)
from .plants import DivergenceError
from .signals import DimensionError

log = logging.getLogger("ddpc")

EXIT_OK, EXIT_FAILED, EXIT_CONFIG = 0, 1, 2


def _say(args, *lines) -> None:
    if not args.quiet:
        for line in lines:
            print(line)


def _fail(msg: str, code: int) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return code


def execute(cfg: ExperimentConfig, kind: str, offline=None) -> RunResult:
    """Build the plant and controller for ``kind`` and run the closed loop."""
    if offline is None:
        offline = make_offline(cfg)
    name = cfg.name if len(cfg.controllers) == 1 else kind
    try:
        controller = cfg.make_controller(kind, offline)
    except (PersistencyError, DimensionError, ControllerError) as exc:
        return _failed_result(name, cfg, f"controller setup failed: {exc}")
    return run_closed_loop(cfg.make_plant(), controller, cfg.make_reference(), cfg.duration,
                           cfg.dt, seed=cfg.seed, u_box=cfg.u_box, name=name)


def make_offline(cfg: ExperimentConfig):
    off = cfg.offline
    plant = cfg.make_plant(with_scenario=False, seed=off["seed"])
    return offline_excitation(plant, off["length"], off["amplitude"], off["seed"], cfg.dt,
                              cfg.u_box)


def _failed_result(name, cfg, error) -> RunResult:
    empty = np.zeros(0)
    return RunResult(name, cfg.dt, empty, empty, np.zeros((0, 1)), np.zeros((0, 1)),
                     np.zeros((0, 1)), np.zeros((0, 1)), empty, np.zeros(0, dtype=bool),
                     seed=cfg.seed, error=error)


def metric_lines(result: RunResult) -> list[str]:
    if result.metrics is None:
        return [f"{result.name}: no samples ({result.error})"]
    width = max(len(v) for v in METRIC_LABELS.values())
    return [f"{label:<{width}}  {value:.6g}" for label, value in result.metrics.table_rows()]


def comparison_table(results: dict[str, RunResult]) -> tuple[str, str]:
    """Comparison as (CSV text, aligned plain text): rows are metrics, columns controllers."""
    kinds = [k for k in CONTROLLER_TYPES if k in results]
    header = ["metric"] + [COLUMN_NAMES[k] for k in kinds]
    rows = []
    for key, label in METRIC_LABELS.items():
        row = [label]
        for k in kinds:
            res = results[k]
            row.append("failed" if not res.ok or res.metrics is None
                       else _fmt(getattr(res.metrics, key)))
        rows.append(row)
    csv_text = _csv_text(header, rows)
    shown = [header] + [[r[0]] + [c if c == "failed" else f"{float(c):.6g}" for c in r[1:]]
                        for r in rows]
    widths = [max(len(r[i]) for r in shown) for i in range(len(header))]
    text = "\n".join("  ".join(cell.ljust(w) if i == 0 else cell.rjust(w)
                               for i, (cell, w) in enumerate(zip(r, widths)))
                     for r in shown) + "\n"
    return csv_text, text


def plot_data(results: dict[str, RunResult]) -> str:
    """Long-format series behind the response, input and input-increment figures."""
    kinds = [k for k in CONTROLLER_TYPES if k in results and len(results[k].t)]
    if not kinds:
        return _csv_text(["t", "r"], [])
    n = max(len(results[k].t) for k in kinds)
    base = max(kinds, key=lambda k: len(results[k].t))
    header = ["t", "r"]
    for k in kinds:
        header += [f"y_{k}", f"u_{k}", f"du_{k}"]
    res0 = results[base]
    rows = []
    for i in range(n):
        row = [_fmt(res0.t[i]), _fmt(res0.r[i])]
        for k in kinds:
            res = results[k]
            if i < len(res.t):
                u = res.u_applied[:, 0]
                du = u[i] - (u[i - 1] if i else 0.0)
                row += [_fmt(res.y[i, 0]), _fmt(u[i]), _fmt(du)]
            else:
                row += ["", "", ""]
        rows.append(row)
    return _csv_text(header, rows)


def cmd_validate(args) -> int:
    try:
        cfg = load_config(args.config, args.seed)
    except ConfigError as exc:
        return _fail(str(exc), EXIT_CONFIG)
    derived = cfg.derived()
    _say(args, f"{cfg.name}: valid", f"  run samples: {derived.pop('samples')}")
    for kind, info in derived.items():
        _say(args, f"  {COLUMN_NAMES[kind]}: " + ", ".join(f"{k} = {v:g}" if isinstance(v, float)
                                                        else f"{k} = {v}" for k, v in info.items()))
    return EXIT_OK


def _load_for(args, want_compare: bool):
    cfg = load_config(args.config, args.seed)
    if want_compare is False and len(cfg.controllers) != 1:
        raise ConfigError("controller", "'run' needs exactly one controller; use 'compare'")
    return cfg


def cmd_run(args) -> int:
    try:
        cfg = _load_for(args, False)
    except ConfigError as exc:
        return _fail(str(exc), EXIT_CONFIG)
    kind = next(iter(cfg.controllers))
    try:
        result = execute(cfg, kind)
    except DivergenceError as exc:
        return _fail(f"offline experiment diverged: {exc}", EXIT_FAILED)
    out = Path(args.out)
    write_run(result, out)
    _say(args, *metric_lines(result), f"outputs written to {out}")
    if not result.ok:
        return _fail(result.error, EXIT_FAILED)
    return EXIT_OK


def cmd_compare(args) -> int:
    try:
        cfg = _load_for(args, True)
    except ConfigError as exc:
        return _fail(str(exc), EXIT_CONFIG)
    try:
        offline = make_offline(cfg)
    except DivergenceError as exc:
        return _fail(f"offline experiment diverged: {exc}", EXIT_FAILED)
    results = {}
    for kind in CONTROLLER_TYPES:
        if kind in cfg.controllers:
            results[kind] = execute(cfg, kind, offline)
    out = Path(args.out)
    for res in results.values():
        write_run(res, out)
    csv_text, text = comparison_table(results)
    atomic_write_text(out / "comparison.csv", csv_text)
    atomic_write_text(out / "comparison.txt", text)
    atomic_write_text(out / "plot_data.csv", plot_data(results))
    atomic_write_text(out / "manifest.json", json.dumps(
        {"name": cfg.name, "seed": cfg.seed, "config": cfg.to_dict()}, indent=2, sort_keys=True) + "\n")
    _say(args, text.rstrip("\n"), f"outputs written to {out}")
    failed = [k for k, r in results.items() if not r.ok]
    if failed:
        return _fail("; ".join(f"{COLUMN_NAMES[k]}: {results[k].error}" for k in failed), EXIT_FAILED)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ddpc", description="Data-driven predictive control benchmark.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, func, help_text in (("run", cmd_run, "simulate one controller"),
                                  ("compare", cmd_compare, "simulate and compare all configured controllers"),
                                  ("validate", cmd_validate, "check a configuration without simulating")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True,
                       help="YAML file or bundled preset name (pendulum_mfapc, pendulum_deepc, "
                            "pendulum_wkpc, paper_benchmark)")
        p.add_argument("--out", default="out", help="output directory (default: out)")
        p.add_argument("--seed", type=int, default=None, help="override the configured seed")
        p.add_argument("--quiet", action="store_true", help="suppress console output")
        p.set_defaults(func=func)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
