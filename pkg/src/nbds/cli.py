"""Command-line front-end: ``nbds synth | sim | compare``.

Exit codes: 0 success, 2 input error, 3 synthesis diagnostics,
4 comparison/grid error, 5 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .errors import (
    GridMismatch,
    MissingS,
    NbdsError,
    NonFiniteState,
    NonPhysicalBias,
    RangeViolation,
    UnknownModel,
    UnsynthesizableExpression,
)
from .netlist import census_line, export_dot, export_json, validate_netlist
from .simulate import (
    Constant,
    SimConfig,
    Step,
    compare_traces,
    integrate_netlist,
    integrate_reference,
    read_trace_csv,
    write_trace_csv,
)
from .synthesis import DeviceParams, load_device, synthesize
from .system import BUILTINS, DynamicalSystem, UnitMap, builtin, load_system, to_electrical

EXIT_INPUT, EXIT_SYNTH, EXIT_GRID, EXIT_NUMERIC = 2, 3, 4, 5


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# Argument helpers
# ---------------------------------------------------------------------------

def load_model(source: str) -> DynamicalSystem:
    """Resolve ``--model``: a built-in name, or a path to a model JSON file."""
    if source in BUILTINS:
        return builtin(source)
    path = Path(source)
    if path.suffix == ".json" or os.sep in source or path.exists():
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise CliError(EXIT_INPUT, f"cannot read model file {source}: {exc.strerror}") from None
        try:
            return load_system(text)
        except NbdsError as exc:
            raise CliError(EXIT_INPUT, f"{source}: {exc}") from None
    raise CliError(EXIT_INPUT, f"unknown model {source!r}: not a built-in ({', '.join(BUILTINS)}) or a file")


def _device(path: str | None) -> DeviceParams:
    if path is None:
        return DeviceParams()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise CliError(EXIT_INPUT, f"cannot read device file {path}: {exc.strerror}") from None
    try:
        return load_device(text)
    except (NbdsError, ValueError) as exc:
        raise CliError(EXIT_INPUT, f"{path}: {exc}") from None


def parse_input(text: str):
    """``name=<amps>`` or ``name=step:<t0>,<level>`` (seconds, amperes)."""
    name, sep, value = text.partition("=")
    if not sep or not name:
        raise CliError(EXIT_INPUT, f"--input expects name=value, got {text!r}")
    try:
        if value.startswith("step:"):
            t0, level = value[5:].split(",")
            return name, Step(float(t0), float(level))
        return name, Constant(float(value))
    except ValueError:
        raise CliError(EXIT_INPUT, f"cannot parse drive {value!r} for input {name!r}") from None


def _units(args) -> UnitMap:
    try:
        return UnitMap(args.current_unit, args.time_unit)
    except ValueError as exc:
        raise CliError(EXIT_INPUT, str(exc)) from None


def _electrical(args) -> tuple[DynamicalSystem, UnitMap]:
    units = _units(args)
    return to_electrical(load_model(args.model), units), units


def _synthesize(system: DynamicalSystem, device: DeviceParams, units: UnitMap):
    try:
        netlist = synthesize(system, device, units)
    except (UnsynthesizableExpression, NonPhysicalBias, MissingS, RangeViolation) as exc:
        raise CliError(EXIT_SYNTH, f"synthesis failed: {exc}") from None
    diags = validate_netlist(netlist)
    if diags:
        raise CliError(EXIT_SYNTH, "netlist diagnostics:\n" + "\n".join(f"  {d}" for d in diags))
    return netlist


def _out_dir(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(EXIT_INPUT, f"cannot create output directory {path}: {exc.strerror}") from None
    return out


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    system, units = _electrical(args)
    netlist = _synthesize(system, _device(args.device), units)
    out = _out_dir(args.out)
    (out / f"{system.name}.netlist.json").write_text(
        json.dumps(export_json(netlist), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (out / f"{system.name}.dot").write_text(export_dot(netlist), encoding="utf-8")
    print(census_line(netlist.census))
    for b in netlist.nbds:
        p = b.params
        print(f"{p['state']}: tau={p['tau']:.6g} s C={p['C']:.6g} F I_dc={p['I_dc']:.6g} A S={p['S']:.6g} sqrt(A)")
    return 0


def _run(job):
    mode, target, cfg = job
    run = integrate_reference if mode == "ref" else integrate_netlist
    try:
        return mode, run(target, cfg), None
    except NonFiniteState as exc:
        return mode, exc.trace, str(exc)


def cmd_sim(args) -> int:
    system, units = _electrical(args)
    taus = [s.tau for s in system.states]
    dt = args.dt if args.dt is not None else min(taus) / 1000.0
    t_end = args.tend if args.tend is not None else 20.0 * max(taus)
    drives = dict(parse_input(s) for s in args.input)
    unknown = set(drives) - set(system.inputs)
    if unknown:
        raise CliError(EXIT_INPUT, f"model {system.name!r} has no input(s) {', '.join(sorted(unknown))}")
    try:
        cfg = SimConfig(dt, t_end, args.stride, drives)
    except ValueError as exc:
        raise CliError(EXIT_INPUT, str(exc)) from None

    modes = ["ref", "netlist"] if args.mode == "both" else [args.mode]
    jobs = []
    for mode in modes:
        target = system if mode == "ref" else _synthesize(system, _device(args.device), units)
        jobs.append((mode, target, cfg))
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(args.jobs, len(jobs))) as pool:
            results = list(pool.map(_run, jobs))
    else:
        results = [_run(j) for j in jobs]

    out = _out_dir(args.out)
    traces = {}
    failure = None
    for mode, trace, err in results:
        path = out / f"{system.name}.{mode}.csv"
        with open(path, "w", encoding="utf-8", newline="") as fh:
            write_trace_csv(trace, fh)
        print(f"{mode}: {path} ({len(trace)} samples, {len(trace.events)} events)")
        traces[mode] = trace
        failure = failure or err
    if failure:
        raise CliError(EXIT_NUMERIC, f"numerical abort: {failure}")
    if len(traces) == 2:
        _report(compare_traces(traces["ref"], traces["netlist"]), out)
    return 0


def _report(rep, out: Path | None) -> None:
    print(f"rmse={rep.rmse:.6g} A max_abs_err={rep.max_abs_err:.6g} A rel_rmse={rep.rel_rmse:.6g}")
    if rep.period_ref is not None or rep.period_test is not None:
        diff = rep.period_rel_diff
        print(f"period_ref={rep.period_ref} s period_test={rep.period_test} s"
              + (f" rel_diff={diff:.6g}" if diff is not None else ""))
    if out is not None:
        (out / "compare.json").write_text(json.dumps(rep.to_document(), indent=2, sort_keys=True) + "\n",
                                          encoding="utf-8")


def cmd_compare(args) -> int:
    traces = []
    for p in (args.ref, args.test):
        try:
            traces.append(read_trace_csv(Path(p)))
        except OSError as exc:
            raise CliError(EXIT_INPUT, f"cannot read trace {p}: {exc.strerror}") from None
        except NbdsError as exc:
            raise CliError(EXIT_INPUT, f"{p}: {exc}") from None
    try:
        rep = compare_traces(*traces)
    except GridMismatch as exc:
        raise CliError(EXIT_GRID, f"GridMismatch: {exc}") from None
    _report(rep, _out_dir(args.out) if args.out else None)
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nbds", description="NBDS current-mode synthesis and simulation")
    sub = parser.add_subparsers(dest="command", required=True)

    def model_opts(p):
        p.add_argument("--model", required=True, help="built-in name or path to a model JSON file")
        p.add_argument("--device", help="device JSON file (default: symmetric 1e-4 A/V^2, I_dc = 1 uA)")
        p.add_argument("--current-unit", type=float, default=1e-6, help="amperes per model unit")
        p.add_argument("--time-unit", type=float, default=1e-3, help="seconds per model time unit")
        p.add_argument("--out", default=".", help="output directory")

    p = sub.add_parser("synth", help="write netlist JSON and DOT, print the block census")
    model_opts(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("sim", help="simulate the reference ODE and/or the netlist, write trace CSV")
    model_opts(p)
    p.add_argument("--mode", choices=("ref", "netlist", "both"), default="both")
    p.add_argument("--dt", "--step", dest="dt", type=float, help="step in seconds (default tau_min/1000)")
    p.add_argument("--tend", type=float, help="end time in seconds (default 20 tau_max)")
    p.add_argument("--stride", type=int, default=1, help="record every N-th step")
    p.add_argument("--input", action="append", default=[], metavar="NAME=DRIVE",
                   help="NAME=<amps> or NAME=step:<t0>,<amps>; repeatable")
    p.add_argument("--jobs", type=int, default=1, help="run independent simulations in N processes")
    p.set_defaults(func=cmd_sim)

    p = sub.add_parser("compare", help="compare two trace CSV files on the same grid")
    p.add_argument("ref")
    p.add_argument("test")
    p.add_argument("--out", help="directory for compare.json")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except UnknownModel as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
