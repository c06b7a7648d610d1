"""Command-line entry points: run, direct, study, snapshot."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import SimConfig, load_config, parse_value
from .errors import ConfigError, PlaquesimError
from .growth import run_direct, run_multiscale
from .io import (
    write_direct_csv,
    write_flow_vtk,
    write_history_csv,
)
from .study import convergence_study, write_report_csv, write_report_text

# Reference-step refinement factors used when a study needs a reference run.
REF_REFINE_DT = 4
REF_REFINE_DT_MACRO = 4
REF_REFINE_EPS_MACRO = 8


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="plaquesim",
        description="Temporal-multiscale plaque growth simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--out", help="output directory (default from config)")

    p_run = sub.add_parser("run", help="multiscale growth run, writes history.csv")
    add_common(p_run)

    p_direct = sub.add_parser(
        "direct", help="fully resolved direct run over the config horizon T"
    )
    add_common(p_direct)

    p_study = sub.add_parser("study", help="convergence study along one axis")
    add_common(p_study)
    p_study.add_argument("--axis", required=True, choices=("dt", "dT", "eps"))
    p_study.add_argument(
        "--values", required=True, help="comma-separated values, decreasing"
    )
    p_study.add_argument("--threads", type=int, default=1)

    p_snap = sub.add_parser(
        "snapshot", help="multiscale run writing VTK snapshots at config times"
    )
    add_common(p_snap)
    return parser


def _load(args) -> SimConfig:
    if args.config:
        config = load_config(args.config)
    else:
        config = SimConfig().validate()
    if args.out:
        config = config.with_overrides(out=args.out)
    return config


def _outdir(config) -> Path:
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _cmd_run(config) -> int:
    result = run_multiscale(config)
    out = _outdir(config)
    write_history_csv(result.state.history, out / "history.csv")
    print(f"U(T={config.T:g}) = {result.state.U:.8g}")
    print(f"history written to {out / 'history.csv'}")
    return 0


def _cmd_direct(config) -> int:
    result = run_direct(config, config.T)
    out = _outdir(config)
    write_direct_csv(result.samples, out / "direct.csv")
    print(f"u(T={config.T:g}) = {result.samples[-1][1]:.8g}")
    print(f"samples written to {out / 'direct.csv'}")
    return 0


def _reference_config(config, axis: str, values):
    if axis == "dt":
        return config.with_overrides(dt=min(values) / REF_REFINE_DT)
    if axis == "dT":
        return config.with_overrides(dT=min(values) / REF_REFINE_DT_MACRO)
    return config.with_overrides(dT=config.dT / REF_REFINE_EPS_MACRO)


def _cmd_study(config, axis: str, values_text: str, threads: int) -> int:
    values = [parse_value("dt", v) for v in values_text.split(",")]
    reference = _reference_config(config, axis, values)
    report = convergence_study(config, axis, values, reference, threads=threads)
    out = _outdir(config)
    write_report_csv(report, out / "report.csv")
    write_report_text(report, out / "report.txt")
    print((out / "report.txt").read_text(), end="")
    return 0


def _cmd_snapshot(config) -> int:
    out = _outdir(config)
    snapdir = out / "snapshots"
    snapdir.mkdir(exist_ok=True)
    written = []

    def callback(record, mesh, field):
        path = snapdir / f"snap_T{record.T_m:g}.vtk"
        write_flow_vtk(mesh, field, path)
        written.append(path)

    result = run_multiscale(config, snapshot_callback=callback)
    write_history_csv(result.state.history, out / "history.csv")
    print(f"U(T={config.T:g}) = {result.state.U:.8g}")
    for path in written:
        print(f"snapshot {path}")
    if not written:
        print("no snapshot times configured (set `snapshots = t1,t2,...`)")
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse uses exit code 2 for usage errors
        return int(exc.code or 0)
    try:
        config = _load(args)
        if args.command == "run":
            return _cmd_run(config)
        if args.command == "direct":
            return _cmd_direct(config)
        if args.command == "study":
            return _cmd_study(config, args.axis, args.values, args.threads)
        if args.command == "snapshot":
            return _cmd_snapshot(config)
        parser.error(f"unknown command {args.command}")
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except PlaquesimError as exc:
        where = getattr(exc, "macro_step_index", None)
        suffix = f" (macro step {where})" if where is not None else ""
        print(f"simulation error{suffix}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
