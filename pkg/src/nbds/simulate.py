"""Fixed-step RK4 integration of reference ODEs and synthesized netlists.

The reference integrator advances ``dx/dt = F(x, u)/tau`` directly.  The
netlist integrator evaluates the block dataflow to get each core's input
current ``F``, recovers the core's branch currents from its output current
and the conserved sum ``S = sqrt(I_A) + sqrt(I_B)``, forms the capacitor
current and advances the core's output current.  Both paths agree to
rounding error as long as no core leaves its range ``|I_out| <= S^2``.
"""

from __future__ import annotations

import bisect
import io
import math
import os
from dataclasses import dataclass, field
from typing import Mapping, Sequence, TextIO

import numpy as np

from .errors import DivisionByZero, GridMismatch, NonFiniteState, RangeViolation, SchemaError
from .expr import compile_exprs
from .netlist import Netlist, compile_dataflow
from .system import DynamicalSystem

MAX_STEPS = 1e9


# ---------------------------------------------------------------------------
# Input drives and configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Constant:
    level: float

    def __call__(self, t: float) -> float:
        return self.level


@dataclass(frozen=True)
class Step:
    """Zero before ``t0``, ``level`` from ``t0`` on."""

    t0: float
    level: float

    def __call__(self, t: float) -> float:
        return self.level if t >= self.t0 else 0.0


@dataclass(frozen=True)
class Piecewise:
    """Linear interpolation through ``(t, value)`` points, held constant outside."""

    points: tuple[tuple[float, float], ...]

    def __post_init__(self):
        pts = tuple((float(t), float(v)) for t, v in self.points)
        if not pts:
            raise ValueError("piecewise drive needs at least one point")
        if any(b[0] <= a[0] for a, b in zip(pts, pts[1:])):
            raise ValueError("piecewise drive times must be strictly increasing")
        object.__setattr__(self, "points", pts)

    def __call__(self, t: float) -> float:
        pts = self.points
        if t <= pts[0][0]:
            return pts[0][1]
        if t >= pts[-1][0]:
            return pts[-1][1]
        i = bisect.bisect_right([p[0] for p in pts], t)
        (t0, v0), (t1, v1) = pts[i - 1], pts[i]
        return v0 + (v1 - v0) * (t - t0) / (t1 - t0)


Drive = Constant | Step | Piecewise


@dataclass(frozen=True)
class SimConfig:
    dt: float
    t_end: float
    record_stride: int = 1
    inputs: Mapping[str, Drive] = field(default_factory=dict)

    def __post_init__(self):
        if not (math.isfinite(self.dt) and self.dt > 0):
            raise ValueError(f"dt must be positive, got {self.dt!r}")
        if not (math.isfinite(self.t_end) and self.t_end >= 0):
            raise ValueError(f"t_end must be non-negative, got {self.t_end!r}")
        if self.t_end / self.dt > MAX_STEPS:
            raise ValueError("t_end/dt exceeds 1e9 steps")
        if int(self.record_stride) != self.record_stride or self.record_stride < 1:
            raise ValueError("record_stride must be a positive integer")
        object.__setattr__(self, "inputs", dict(self.inputs))

    @property
    def n_steps(self) -> int:
        return int(math.floor(self.t_end / self.dt + 1e-9))


# ---------------------------------------------------------------------------
# Traces
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Event:
    time: float
    kind: str
    detail: str = ""


@dataclass(frozen=True)
class Trace:
    times: np.ndarray
    names: tuple[str, ...]
    values: np.ndarray  # shape (samples, states)
    events: tuple[Event, ...] = ()
    branches: np.ndarray | None = None  # shape (samples, states, 2): I_A, I_B

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.names.index(name)]

    def __len__(self) -> int:
        return len(self.times)


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def write_trace_csv(trace: Trace, out: TextIO) -> None:
    out.write(",".join(["t_s"] + [f"{n}_A" for n in trace.names]) + "\n")
    for t, row in zip(trace.times, trace.values):
        out.write(",".join([_fmt(t)] + [_fmt(v) for v in row]) + "\n")
    for ev in trace.events:
        out.write(f"# event,{_fmt(ev.time)},{ev.kind},{ev.detail}\n")


def trace_to_csv(trace: Trace) -> str:
    buf = io.StringIO()
    write_trace_csv(trace, buf)
    return buf.getvalue()


def read_trace_csv(source: str | os.PathLike) -> Trace:
    """Parse a trace written by :func:`write_trace_csv` (path or CSV text)."""
    if isinstance(source, os.PathLike) or "\n" not in str(source):
        with open(source, encoding="utf-8") as fh:
            text = fh.read()
    else:
        text = str(source)
    lines = text.splitlines()
    if not lines or not lines[0].startswith("t_s"):
        raise SchemaError("trace CSV must start with a 't_s,...' header")
    header = lines[0].split(",")
    names = []
    for h in header[1:]:
        if not h.endswith("_A"):
            raise SchemaError(f"trace column {h!r} lacks the _A suffix")
        names.append(h[:-2])
    times, rows, events = [], [], []
    for ln in lines[1:]:
        if not ln.strip():
            continue
        if ln.startswith("#"):
            parts = ln[1:].strip().split(",", 3)
            if parts[0] == "event" and len(parts) >= 3:
                events.append(Event(float(parts[1]), parts[2], parts[3] if len(parts) > 3 else ""))
            continue
        cells = ln.split(",")
        if len(cells) != len(header):
            raise SchemaError(f"trace row has {len(cells)} cells, header has {len(header)}")
        try:
            times.append(float(cells[0]))
            rows.append([float(c) for c in cells[1:]])
        except ValueError as exc:
            raise SchemaError(f"bad number in trace: {exc}") from None
    return Trace(np.array(times), tuple(names), np.array(rows, dtype=float).reshape(len(rows), len(names)),
                 tuple(events))


# ---------------------------------------------------------------------------
# Core behavioral model
# ---------------------------------------------------------------------------

def recover_branch_currents(i_out: float, s: float) -> tuple[float, float]:
    """Branch currents ``(I_A, I_B)`` with ``I_B - I_A = i_out`` and ``sqrt(I_A) + sqrt(I_B) = s``."""
    if not s > 0:
        raise ValueError(f"S must be positive, got {s!r}")
    if abs(i_out) > s * s:
        raise RangeViolation(i_out, s)
    r = i_out / s
    a = 0.5 * (s - r)
    b = 0.5 * (s + r)
    return a * a, b * b


def _drives(names: Sequence[str], cfg: SimConfig, defaults: Mapping[str, float]) -> list:
    unknown = set(cfg.inputs) - set(names)
    if unknown:
        raise SchemaError(f"drive given for undeclared input(s): {', '.join(sorted(unknown))}")
    return [cfg.inputs.get(n, Constant(float(defaults.get(n, 0.0)))) for n in names]


class _Recorder:
    def __init__(self, names, stride, with_branches=False):
        self.names = tuple(names)
        self.stride = stride
        self.times: list[float] = []
        self.rows: list[list[float]] = []
        self.branches: list | None = [] if with_branches else None
        self.events: list[Event] = []

    def record(self, t, x, branches=None):
        self.times.append(t)
        self.rows.append(list(x))
        if self.branches is not None:
            self.branches.append(branches)

    def trace(self) -> Trace:
        br = None if self.branches is None else np.array(self.branches, dtype=float)
        return Trace(np.array(self.times), self.names,
                     np.array(self.rows, dtype=float).reshape(len(self.rows), len(self.names)),
                     tuple(self.events), br)


def _abort(rec: _Recorder, t: float, why: str):
    rec.events.append(Event(t, "NonFiniteState", why))
    return NonFiniteState(t, rec.trace())


def integrate_reference(system: DynamicalSystem, cfg: SimConfig) -> Trace:
    """Classical RK4 on ``dx/dt = F(x, u)/tau`` for every state."""
    names = system.state_names
    f = compile_exprs([s.rhs for s in system.states], list(names) + list(system.inputs), system.parameters)
    inv_tau = [1.0 / s.tau for s in system.states]
    drives = _drives(system.inputs, cfg, system.input_defaults)
    dim = len(names)
    dt = cfg.dt
    half = 0.5 * dt
    sixth = dt / 6.0

    def deriv(x, t):
        u = [d(t) for d in drives]
        fx = f(*x, *u)
        return [fx[i] * inv_tau[i] for i in range(dim)]

    x = [float(s.initial_value) for s in system.states]
    rec = _Recorder(names, cfg.record_stride)
    rec.record(0.0, x)
    for k in range(cfg.n_steps):
        t = k * dt
        try:
            k1 = deriv(x, t)
            k2 = deriv([x[i] + half * k1[i] for i in range(dim)], t + half)
            k3 = deriv([x[i] + half * k2[i] for i in range(dim)], t + half)
            k4 = deriv([x[i] + dt * k3[i] for i in range(dim)], t + dt)
        except (DivisionByZero, OverflowError) as exc:
            raise _abort(rec, t, str(exc)) from None
        x = [x[i] + sixth * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]) for i in range(dim)]
        t_next = (k + 1) * dt
        if not all(math.isfinite(v) for v in x):
            raise _abort(rec, t_next, "reference state")
        if (k + 1) % cfg.record_stride == 0:
            rec.record(t_next, x)
    return rec.trace()


def integrate_netlist(netlist: Netlist, cfg: SimConfig, record_branches: bool = True) -> Trace:
    """RK4 on the capacitor-current dynamics of every NBDS core.

    Out-of-range output currents are clamped to ``+-S^2`` after the step and
    logged once per excursion; MULT denominators under 1 pA are floored and
    logged once per excursion.
    """
    cores = netlist.nbds
    names = tuple(b.params["state"] for b in cores)
    df = compile_dataflow(netlist)
    inputs = netlist.of_kind("INPUT")
    input_names = [b.params["name"] for b in inputs]
    drives = _drives(input_names, cfg, {b.params["name"]: b.params.get("default", 0.0) for b in inputs})
    k_n, k_p = netlist.device["k_n"], netlist.device["k_p"]
    two_sqrt_kn = 2.0 * math.sqrt(k_n)
    beta = math.sqrt(k_n / k_p)
    S = [float(b.params["S"]) for b in cores]
    S2 = [s * s for s in S]
    I_dc = [float(b.params["I_dc"]) for b in cores]
    denom = [(2.0 + beta) * float(b.params["C"]) for b in cores]
    dim = len(cores)
    dt = cfg.dt
    half = 0.5 * dt
    sixth = dt / 6.0
    floored: list[str] = []
    sqrt = math.sqrt

    def deriv(x, t):
        u = [d(t) for d in drives]
        F = df(x, u, floored)
        out = []
        for i in range(dim):
            xi = x[i]
            if xi > S2[i]:
                xi = S2[i]
            elif xi < -S2[i]:
                xi = -S2[i]
            ia, ib = recover_branch_currents(xi, S[i])
            ssum = sqrt(ia) + sqrt(ib)
            i_cin = F[i] * I_dc[i] / ssum
            out.append(ssum * two_sqrt_kn * i_cin / denom[i])
        return out

    def branches(x):
        return [recover_branch_currents(max(-S2[i], min(S2[i], x[i])), S[i]) for i in range(dim)]

    x = [float(b.params["init"]) for b in cores]
    for i in range(dim):
        if abs(x[i]) > S2[i]:
            raise RangeViolation(x[i], S[i])
    rec = _Recorder(names, cfg.record_stride, with_branches=record_branches)
    rec.record(0.0, x, branches(x) if record_branches else None)
    clamped = [False] * dim
    prev_floor: set[str] = set()
    for k in range(cfg.n_steps):
        t = k * dt
        floored.clear()
        try:
            k1 = deriv(x, t)
            k2 = deriv([x[i] + half * k1[i] for i in range(dim)], t + half)
            k3 = deriv([x[i] + half * k2[i] for i in range(dim)], t + half)
            k4 = deriv([x[i] + dt * k3[i] for i in range(dim)], t + dt)
        except (OverflowError, ZeroDivisionError, ValueError) as exc:
            raise _abort(rec, t, str(exc)) from None
        x = [x[i] + sixth * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]) for i in range(dim)]
        t_next = (k + 1) * dt
        if not all(math.isfinite(v) for v in x):
            raise _abort(rec, t_next, "netlist state")
        now_floor = set(floored)
        for bid in sorted(now_floor - prev_floor):
            rec.events.append(Event(t, "DenominatorFloor", f"{bid} denominator below 1 pA"))
        prev_floor = now_floor
        for i in range(dim):
            if abs(x[i]) > S2[i]:
                if not clamped[i]:
                    rec.events.append(Event(t_next, "RangeViolation",
                                            f"{names[i]} |I_out|={abs(x[i]):.6g} A > S^2={S2[i]:.6g} A"))
                clamped[i] = True
                x[i] = math.copysign(S2[i], x[i])
            else:
                clamped[i] = False
        if (k + 1) % cfg.record_stride == 0:
            rec.record(t_next, x, branches(x) if record_branches else None)
    return rec.trace()


# ---------------------------------------------------------------------------
# Comparison
# ---------------------------------------------------------------------------

def estimate_period(trace: Trace, state: str, threshold: float) -> float | None:
    """Mean spacing of upward ``threshold`` crossings, or None with fewer than three."""
    y = trace.column(state)
    t = trace.times
    below = y[:-1] < threshold
    above = y[1:] >= threshold
    idx = np.nonzero(below & above)[0]
    if len(idx) < 3:
        return None
    y0, y1 = y[idx], y[idx + 1]
    frac = (threshold - y0) / (y1 - y0)
    crossings = t[idx] + frac * (t[idx + 1] - t[idx])
    return float(np.mean(np.diff(crossings)))


def oscillation_threshold(trace: Trace, state: str) -> float:
    """Midrange of the second half of a trace, used as the period-detection level."""
    y = trace.column(state)[len(trace) // 2:]
    return 0.5 * (float(np.max(y)) + float(np.min(y)))


@dataclass(frozen=True)
class CompareReport:
    rmse: float
    max_abs_err: float
    rel_rmse: float
    period_ref: float | None
    period_test: float | None
    per_state: Mapping[str, Mapping[str, float]] = field(default_factory=dict)

    @property
    def period_rel_diff(self) -> float | None:
        if self.period_ref is None or self.period_test is None:
            return None
        return abs(self.period_test - self.period_ref) / self.period_ref

    def to_document(self) -> dict:
        return {
            "rmse": self.rmse,
            "max_abs_err": self.max_abs_err,
            "rel_rmse": self.rel_rmse,
            "period_ref": self.period_ref,
            "period_test": self.period_test,
            "per_state": {k: dict(v) for k, v in self.per_state.items()},
        }


def _rel(rmse: float, ref_rms: float) -> float:
    if ref_rms > 0:
        return rmse / ref_rms
    return 0.0 if rmse == 0 else math.inf


def compare_traces(ref: Trace, test: Trace, period_state: str | None = None) -> CompareReport:
    if ref.names != test.names:
        raise GridMismatch(f"state columns differ: {ref.names} vs {test.names}")
    if len(ref) != len(test):
        raise GridMismatch(f"sample counts differ: {len(ref)} vs {len(test)}")
    scale = max(1.0, float(np.max(np.abs(ref.times)))) if len(ref) else 1.0
    if len(ref) and float(np.max(np.abs(ref.times - test.times))) > 1e-9 * scale:
        raise GridMismatch("sample times differ")
    err = test.values - ref.values
    rmse = float(np.sqrt(np.mean(err ** 2))) if err.size else 0.0
    max_abs = float(np.max(np.abs(err))) if err.size else 0.0
    ref_rms = float(np.sqrt(np.mean(ref.values ** 2))) if err.size else 0.0
    per_state = {}
    for j, name in enumerate(ref.names):
        e = err[:, j]
        r = float(np.sqrt(np.mean(e ** 2)))
        per_state[name] = {
            "rmse": r,
            "max_abs_err": float(np.max(np.abs(e))),
            "rel_rmse": _rel(r, float(np.sqrt(np.mean(ref.values[:, j] ** 2)))),
        }
    p_ref = p_test = None
    state = period_state or (ref.names[0] if ref.names else None)
    if state is not None and len(ref) > 3:
        level = oscillation_threshold(ref, state)
        p_ref = estimate_period(ref, state, level)
        p_test = estimate_period(test, state, level)
    return CompareReport(rmse, max_abs, _rel(rmse, ref_rms), p_ref, p_test, per_state)
