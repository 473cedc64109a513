"""Block netlists: data model, structural checks, JSON/DOT export, dataflow evaluation.

Nets carry currents.  A net is either *driven* (by exactly one block output
port) or *summing* (its value is the sum of the listed member nets, i.e. the
wires are tied together).  Fan-out goes through copy mirrors: a net may have
at most one direct reader; every further reader hangs off its own
``MIRROR(role="copy")``.  Gain mirrors (``role="gain"``) realize constant
coefficients and count as ordinary readers.
"""

from __future__ import annotations

import graphlib
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping

from .errors import SchemaError
from .expr import Diagnostic

SCHEMA_ID = "nbds-netlist/1"

# kind -> (input ports, output ports)
PORTS: dict[str, tuple[tuple[str, ...], tuple[str, ...]]] = {
    "NBDS": (("plus", "minus"), ("out",)),
    "MULT": (("in1", "in2", "in3"), ("out",)),
    "SPLITTER": (("in",), ("plus", "minus")),
    "MIRROR": (("in",), ("out",)),
    "DCSOURCE": ((), ("out",)),
    "INPUT": ((), ("out",)),
    "OUTPUT": (("in",), ()),
}
BLOCK_KINDS = tuple(PORTS)
POLARITIES = ("plus", "minus", "bilateral-pair")
DENOMINATOR_FLOOR = 1e-12  # A


@dataclass
class Block:
    id: str
    kind: str
    params: dict[str, Any] = field(default_factory=dict)
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)

    @property
    def is_copy_mirror(self) -> bool:
        return self.kind == "MIRROR" and self.params.get("role") == "copy"


@dataclass
class Net:
    id: str
    polarity: str
    sum_of: tuple[str, ...] | None = None  # None: driven by a block port

    @property
    def is_sum(self) -> bool:
        return self.sum_of is not None


@dataclass
class Netlist:
    name: str
    blocks: list[Block]
    nets: list[Net]
    device: dict[str, float]
    census: dict[str, int] = field(default_factory=dict)
    meta: dict[str, Any] = field(default_factory=dict)

    def block(self, block_id: str) -> Block:
        for b in self.blocks:
            if b.id == block_id:
                return b
        raise KeyError(block_id)

    def net(self, net_id: str) -> Net:
        for n in self.nets:
            if n.id == net_id:
                return n
        raise KeyError(net_id)

    def of_kind(self, kind: str) -> list[Block]:
        return [b for b in self.blocks if b.kind == kind]

    @property
    def nbds(self) -> list[Block]:
        return sorted(self.of_kind("NBDS"), key=lambda b: b.params["dimension"])

    @property
    def input_names(self) -> list[str]:
        return [b.params["name"] for b in self.of_kind("INPUT")]

    @property
    def state_names(self) -> list[str]:
        return [b.params["state"] for b in self.nbds]


def census_of(blocks) -> dict[str, int]:
    counts = Counter(b.kind for b in blocks)
    return {k: counts.get(k, 0) for k in BLOCK_KINDS}


def census_line(census: Mapping[str, int]) -> str:
    return " ".join(f"{k}={census.get(k, 0)}" for k in BLOCK_KINDS)


def bias_ratio(tau: float, k_n: float, k_p: float) -> float:
    """Required C / I_dc of an NBDS core for circuit time constant ``tau``."""
    beta = math.sqrt(k_n / k_p)
    return 2.0 * tau * math.sqrt(k_n) / (2.0 + beta)


# ---------------------------------------------------------------------------
# Reader bookkeeping
# ---------------------------------------------------------------------------

def readers(netlist: Netlist) -> dict[str, list[tuple[str, str, Any]]]:
    """Map net id -> ordered readers ``("block", block_id, port)`` / ``("sum", net_id, index)``."""
    out: dict[str, list] = {n.id: [] for n in netlist.nets}
    for b in netlist.blocks:
        for port in PORTS.get(b.kind, ((), ()))[0]:
            nid = b.inputs.get(port)
            if nid in out:
                out[nid].append(("block", b.id, port))
    for n in netlist.nets:
        for i, m in enumerate(n.sum_of or ()):
            if m in out:
                out[m].append(("sum", n.id, i))
    return out


def mirror_accounting(netlist: Netlist) -> tuple[int, int]:
    """Return ``(copy mirrors present, sum over nets of max(0, logical readers - 1))``."""
    blocks = {b.id: b for b in netlist.blocks}
    rd = readers(netlist)
    copies = [b for b in netlist.blocks if b.is_copy_mirror]
    expected = 0
    copy_outputs = {b.outputs["out"] for b in copies}
    for nid, rs in rd.items():
        if nid in copy_outputs:
            continue
        logical = 0
        for kind, ref, _ in rs:
            if kind == "block" and blocks[ref].is_copy_mirror:
                logical += len(rd.get(blocks[ref].outputs["out"], []))
            else:
                logical += 1
        expected += max(0, logical - 1)
    return len(copies), expected


def _driver_map(netlist: Netlist) -> dict[str, tuple[str, str]]:
    drivers: dict[str, tuple[str, str]] = {}
    for b in netlist.blocks:
        for port, nid in b.outputs.items():
            drivers.setdefault(nid, (b.id, port))
    return drivers


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

def validate_netlist(netlist: Netlist, rel_tol: float = 1e-12) -> list[Diagnostic]:
    """Check every structural invariant; one diagnostic per violation."""
    diags: list[Diagnostic] = []

    def bad(code: str, msg: str, where: str) -> None:
        diags.append(Diagnostic(code, msg, where))

    net_ids = [n.id for n in netlist.nets]
    nets = {n.id: n for n in netlist.nets}
    blocks = {b.id: b for b in netlist.blocks}
    for nid, c in Counter(net_ids).items():
        if c > 1:
            bad("DuplicateId", f"net id used {c} times", nid)
    for bid, c in Counter(b.id for b in netlist.blocks).items():
        if c > 1:
            bad("DuplicateId", f"block id used {c} times", bid)

    for n in netlist.nets:
        if n.polarity not in POLARITIES:
            bad("BadPolarity", f"unknown polarity {n.polarity!r}", n.id)
        for m in n.sum_of or ():
            if m not in nets:
                bad("UnknownNet", f"summing net lists unknown member {m!r}", n.id)

    driver_count: Counter = Counter()
    for b in netlist.blocks:
        if b.kind not in PORTS:
            bad("BadKind", f"unknown block kind {b.kind!r}", b.id)
            continue
        ins, outs = PORTS[b.kind]
        if set(b.inputs) != set(ins) or set(b.outputs) != set(outs):
            bad("BadPorts", f"{b.kind} needs inputs {ins} and outputs {outs}", b.id)
        for nid in list(b.inputs.values()) + list(b.outputs.values()):
            if nid not in nets:
                bad("UnknownNet", f"port connected to unknown net {nid!r}", b.id)
        for nid in b.outputs.values():
            driver_count[nid] += 1
            if nid in nets and nets[nid].is_sum:
                bad("MultipleDrivers", "block output drives a summing net", nid)
    for n in netlist.nets:
        if driver_count[n.id] > 1:
            bad("MultipleDrivers", f"{driver_count[n.id]} block outputs drive this net", n.id)
        if not n.is_sum and driver_count[n.id] == 0:
            bad("FloatingNet", "net has no driver", n.id)
    if diags:
        return diags  # later checks assume a well-formed graph

    # One NBDS per dimension.
    nbds = netlist.of_kind("NBDS")
    dims = Counter(b.params.get("dimension") for b in nbds)
    for d in range(len(nbds)):
        if dims.get(d, 0) != 1:
            bad("NbdsDimension", f"dimension {d} has {dims.get(d, 0)} NBDS blocks", f"dim{d}")
    if not nbds:
        bad("NbdsDimension", "netlist contains no NBDS block", netlist.name)

    drivers = _driver_map(netlist)

    def root(nid: str, through_gain: bool = False) -> str:
        seen = set()
        while nid in drivers and nid not in seen:
            seen.add(nid)
            b = blocks[drivers[nid][0]]
            if b.kind == "MIRROR" and (through_gain or b.is_copy_mirror):
                nid = b.inputs["in"]
            else:
                break
        return nid

    def is_dc(nid: str) -> bool:
        r = root(nid, through_gain=True)
        return r in drivers and blocks[drivers[r][0]].kind == "DCSOURCE"

    for b in netlist.of_kind("MULT"):
        den = root(b.inputs["in3"])
        ok = is_dc(den) or (nets[den].is_sum and any(is_dc(m) for m in nets[den].sum_of))
        if not ok:
            bad("PositivityGuardMissing", "MULT denominator has no DC bias current", b.id)

    rd = readers(netlist)
    copy_outputs = {b.outputs["out"]: b for b in netlist.blocks if b.is_copy_mirror}
    for nid, rs in rd.items():
        direct = [r for r in rs if not (r[0] == "block" and blocks[r[1]].is_copy_mirror)]
        n_copies = len(rs) - len(direct)
        if len(direct) > 1:
            bad("MirrorMissing", f"net read directly by {len(direct)} consumers", nid)
        if n_copies and not direct:
            bad("MirrorSurplus", "copy mirrors on a net without a direct consumer", nid)
        if nid in copy_outputs and len(rs) != 1:
            bad("MirrorDangling", f"copy-mirror output has {len(rs)} readers", copy_outputs[nid].id)

    try:
        _topological_nets(netlist)
    except graphlib.CycleError as exc:
        bad("AlgebraicLoop", "combinational loop not broken by an NBDS", str(exc.args[1][:4]))

    # Every capacitor node must be reachable from a source.
    for b in nbds:
        members = [m for port in ("plus", "minus") for m in (nets[b.inputs[port]].sum_of or (b.inputs[port],))]
        if not members:
            bad("NbdsUnreachable", "capacitor input has no contributions", b.id)

    k_n, k_p = netlist.device.get("k_n"), netlist.device.get("k_p")
    for b in nbds:
        p = b.params
        if not all(p.get(k, 0) > 0 for k in ("C", "I_dc", "tau", "S")):
            bad("BiasRatio", "C, I_dc, tau and S must all be positive", b.id)
            continue
        want = bias_ratio(p["tau"], k_n, k_p)
        if abs(p["C"] / p["I_dc"] - want) > rel_tol * want:
            bad("BiasRatio", f"C/I_dc={p['C'] / p['I_dc']!r} but core relation requires {want!r}", b.id)

    if netlist.census and netlist.census != census_of(netlist.blocks):
        bad("CensusMismatch", "recorded census differs from block counts", netlist.name)
    return diags


# ---------------------------------------------------------------------------
# Dataflow evaluation
# ---------------------------------------------------------------------------

def _topological_nets(netlist: Netlist) -> list[str]:
    blocks = {b.id: b for b in netlist.blocks}
    drivers = _driver_map(netlist)
    ts: graphlib.TopologicalSorter = graphlib.TopologicalSorter()
    for n in netlist.nets:
        if n.is_sum:
            ts.add(n.id, *n.sum_of)
        elif n.id in drivers:
            b = blocks[drivers[n.id][0]]
            deps = () if b.kind in ("NBDS", "INPUT", "DCSOURCE") else tuple(b.inputs.values())
            ts.add(n.id, *deps)
        else:
            ts.add(n.id)
    return list(ts.static_order())


Dataflow = Callable[[list, list, list], list]


def compile_dataflow(netlist: Netlist) -> Dataflow:
    """Compile the block graph into ``f(states, inputs, floored) -> [F_N]``.

    ``states`` are NBDS outputs ordered by dimension, ``inputs`` follow
    :attr:`Netlist.input_names`.  MULT blocks whose denominator magnitude falls
    below 1 pA clamp it and append their id to ``floored``.  Each returned
    ``F_N`` is plus-rail minus minus-rail current of NBDS ``N``.
    """
    order = _topological_nets(netlist)
    blocks = {b.id: b for b in netlist.blocks}
    drivers = _driver_map(netlist)
    nets = {n.id: n for n in netlist.nets}
    var = {nid: f"v{i}" for i, nid in enumerate(order)}
    dim_of = {b.id: b.params["dimension"] for b in netlist.of_kind("NBDS")}
    input_index = {name: i for i, name in enumerate(netlist.input_names)}
    floor = repr(DENOMINATOR_FLOOR)

    lines = []
    for nid in order:
        v = var[nid]
        n = nets[nid]
        if n.is_sum:
            rhs = " + ".join(var[m] for m in n.sum_of) if n.sum_of else "0.0"
            lines.append(f"{v} = {rhs}")
            continue
        bid, port = drivers[nid]
        b = blocks[bid]
        if b.kind == "NBDS":
            lines.append(f"{v} = x[{dim_of[bid]}]")
        elif b.kind == "INPUT":
            lines.append(f"{v} = u[{input_index[b.params['name']]}]")
        elif b.kind == "DCSOURCE":
            lines.append(f"{v} = {float(b.params['amps'])!r}")
        elif b.kind == "MIRROR":
            g = float(b.params.get("gain", 1.0))
            src = var[b.inputs["in"]]
            lines.append(f"{v} = {src}" if g == 1.0 else f"{v} = {g!r} * {src}")
        elif b.kind == "SPLITTER":
            src = var[b.inputs["in"]]
            if port == "plus":
                lines.append(f"{v} = {src} if {src} > 0.0 else 0.0")
            else:
                lines.append(f"{v} = -{src} if {src} < 0.0 else 0.0")
        elif b.kind == "MULT":
            a, c, d = (var[b.inputs[p]] for p in ("in1", "in2", "in3"))
            lines += [
                f"_d = {d}",
                f"if -{floor} < _d < {floor}:",
                f"    floored.append({bid!r})",
                f"    _d = -{floor} if _d < 0.0 else {floor}",
                f"{v} = {a} * {c} / _d",
            ]
        else:  # pragma: no cover - validated kinds only
            raise SchemaError(f"block {bid} of kind {b.kind} cannot drive a net")

    outs = []
    for b in netlist.nbds:
        outs.append(f"{var[b.inputs['plus']]} - {var[b.inputs['minus']]}")
    body = "\n    ".join(lines) if lines else "pass"
    src = f"def _dataflow(x, u, floored):\n    {body}\n    return [{', '.join(outs)}]\n"
    ns: dict = {}
    exec(compile(src, f"<netlist {netlist.name}>", "exec"), ns)
    return ns["_dataflow"]


def evaluate_netlist(netlist: Netlist, states: Mapping[str, float], inputs: Mapping[str, float]) -> dict[str, float]:
    """Evaluate every NBDS right-hand side at one operating point (keyed by state name)."""
    f = compile_dataflow(netlist)
    x = [states[s] for s in netlist.state_names]
    u = [inputs.get(name, 0.0) for name in netlist.input_names]
    return dict(zip(netlist.state_names, f(x, u, [])))


# ---------------------------------------------------------------------------
# JSON and DOT
# ---------------------------------------------------------------------------

def export_json(netlist: Netlist) -> dict[str, Any]:
    return {
        "schema": SCHEMA_ID,
        "name": netlist.name,
        "device": dict(netlist.device),
        "meta": dict(netlist.meta),
        "census": dict(netlist.census),
        "blocks": [
            {"id": b.id, "kind": b.kind, "params": dict(b.params),
             "inputs": dict(b.inputs), "outputs": dict(b.outputs)}
            for b in netlist.blocks
        ],
        "nets": [
            {"id": n.id, "polarity": n.polarity,
             "sum_of": None if n.sum_of is None else list(n.sum_of)}
            for n in netlist.nets
        ],
    }


def import_json(document: Mapping[str, Any]) -> Netlist:
    """Inverse of :func:`export_json`."""
    if document.get("schema") != SCHEMA_ID:
        raise SchemaError(f"expected schema {SCHEMA_ID!r}, got {document.get('schema')!r}")
    try:
        return Netlist(
            name=document["name"],
            blocks=[
                Block(b["id"], b["kind"], dict(b.get("params", {})),
                      dict(b.get("inputs", {})), dict(b.get("outputs", {})))
                for b in document["blocks"]
            ],
            nets=[
                Net(n["id"], n["polarity"], None if n.get("sum_of") is None else tuple(n["sum_of"]))
                for n in document["nets"]
            ],
            device=dict(document["device"]),
            census=dict(document.get("census", {})),
            meta=dict(document.get("meta", {})),
        )
    except (KeyError, TypeError) as exc:
        raise SchemaError(f"malformed netlist document: {exc!r}") from None


_SHAPES = {
    "NBDS": "box3d",
    "MULT": "Msquare",
    "SPLITTER": "triangle",
    "MIRROR": "doublecircle",
    "DCSOURCE": "circle",
    "INPUT": "invhouse",
    "OUTPUT": "house",
}


def _fmt(v: float) -> str:
    return f"{v:.4g}"


def _label(b: Block) -> str:
    p = b.params
    if b.kind == "NBDS":
        return f"NBDS {p['state']}\\nC={_fmt(p['C'])} F\\nI_dc={_fmt(p['I_dc'])} A"
    if b.kind == "MULT":
        return "MULT\\nin1*in2/in3"
    if b.kind == "MIRROR":
        return "x1" if p.get("role") == "copy" else f"x{_fmt(p['gain'])}"
    if b.kind == "DCSOURCE":
        return f"{_fmt(p['amps'])} A"
    if b.kind in ("INPUT", "OUTPUT"):
        return p["name"]
    return b.kind


def export_dot(netlist: Netlist) -> str:
    """Graphviz rendering: one node per block, summing nets as junction points."""
    drivers = _driver_map(netlist)
    lines = [f'digraph "{netlist.name}" {{', "  rankdir=LR;", '  node [fontname="Helvetica"];']
    for b in netlist.blocks:
        lines.append(f'  "{b.id}" [label="{_label(b)}", shape={_SHAPES.get(b.kind, "box")}];')
    for n in netlist.nets:
        if n.is_sum:
            lines.append(f'  "{n.id}" [label="", shape=point, xlabel="{n.id}"];')

    def source(nid: str) -> str:
        return nid if netlist.net(nid).is_sum else drivers[nid][0]

    rd = readers(netlist)
    for n in netlist.nets:
        for kind, ref, port in rd[n.id]:
            style = ', style=dashed' if n.polarity == "minus" else ""
            head = ref
            lines.append(f'  "{source(n.id)}" -> "{head}" [label="{n.id}:{port}"{style}];')
    lines.append("}")
    return "\n".join(lines) + "\n"
