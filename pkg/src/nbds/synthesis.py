"""Compile an electrical-domain system into an NBDS block netlist.

Every state becomes one NBDS core.  Its right-hand side is split into
positive and negative addends; each addend is realized as a chain of
translinear MULT blocks (``in1*in2/in3``) fed by state nets, input splitters
and DC sources, scaled by a gain mirror, and tied onto the matching capacitor
rail.  Identical sub-circuits are shared, and a final pass gives every net
with several consumers the copy mirrors it needs.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import jsonschema

from .errors import (
    MissingS,
    NonPhysicalBias,
    RangeViolation,
    SchemaError,
    UnsynthesizableExpression,
)
from .expr import (
    Add,
    Const,
    Div,
    Expr,
    Mul,
    Neg,
    Pow,
    Sym,
    eval_expr,
    is_constant,
    split_terms,
    validate_synthesizable,
)
from .netlist import PORTS, Block, Net, Netlist, bias_ratio, census_of, readers
from .system import DynamicalSystem, UnitMap

C_MIN = 1e-15  # F
I_DC_MIN = 1e-12  # A


# ---------------------------------------------------------------------------
# Device parameters and bias
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DeviceParams:
    """Transistor transconductance factors and the bias policy.

    ``policy`` is ``"fixed_I_dc"`` or ``"fixed_C"``; ``policy_value`` holds the
    fixed quantity, either one value for every core or one per dimension.
    ``S`` of ``None`` selects the default range headroom per core.
    """

    k_n: float = 1e-4
    k_p: float = 1e-4
    S: tuple[float, ...] | None = None
    policy: str = "fixed_I_dc"
    policy_value: float | tuple[float, ...] = 1e-6

    def __post_init__(self):
        for name in ("k_n", "k_p"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be positive and finite, got {v!r}")
        if self.policy not in ("fixed_I_dc", "fixed_C"):
            raise ValueError(f"unknown bias policy {self.policy!r}")
        if self.S is not None:
            object.__setattr__(self, "S", tuple(float(s) for s in self.S))
            if any(not (math.isfinite(s) and s > 0) for s in self.S):
                raise ValueError("S values must be positive")
        if not isinstance(self.policy_value, (int, float)):
            object.__setattr__(self, "policy_value", tuple(float(v) for v in self.policy_value))

    @property
    def beta(self) -> float:
        return math.sqrt(self.k_n / self.k_p)

    def fixed_value(self, dim: int) -> float:
        v = self.policy_value
        if isinstance(v, tuple):
            if dim >= len(v):
                raise ValueError(f"bias policy lists {len(v)} values, dimension {dim} needs one")
            return v[dim]
        return float(v)

    def headroom(self, dim: int, i_dc: float) -> float:
        if self.S is None:
            return 2.0 * math.sqrt(10.0 * i_dc)
        if dim >= len(self.S):
            raise MissingS(dim)
        return self.S[dim]

    def to_document(self) -> dict[str, Any]:
        v = self.policy_value
        return {
            "k_n": self.k_n,
            "k_p": self.k_p,
            "S": "auto" if self.S is None else list(self.S),
            "policy": {self.policy: list(v) if isinstance(v, tuple) else v},
        }


_POSITIVE_OR_LIST = {
    "oneOf": [
        {"type": "number", "exclusiveMinimum": 0},
        {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}, "minItems": 1},
    ]
}

DEVICE_SCHEMA = {
    "type": "object",
    "properties": {
        "k_n": {"type": "number", "exclusiveMinimum": 0},
        "k_p": {"type": "number", "exclusiveMinimum": 0},
        "S": {"oneOf": [
            {"const": "auto"},
            {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}},
        ]},
        "policy": {
            "type": "object",
            "properties": {"fixed_I_dc": _POSITIVE_OR_LIST, "fixed_C": _POSITIVE_OR_LIST},
            "minProperties": 1,
            "maxProperties": 1,
            "additionalProperties": False,
        },
    },
    "additionalProperties": False,
}


def load_device(document: str | Mapping[str, Any]) -> DeviceParams:
    if isinstance(document, str):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"device file is not valid JSON: {exc}") from None
    try:
        jsonschema.validate(document, DEVICE_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise SchemaError(f"device document: {exc.message}") from None
    kwargs: dict[str, Any] = {}
    for k in ("k_n", "k_p"):
        if k in document:
            kwargs[k] = float(document[k])
    s = document.get("S", "auto")
    kwargs["S"] = None if s == "auto" else tuple(s)
    if "policy" in document:
        (policy, value), = document["policy"].items()
        kwargs["policy"] = policy
        kwargs["policy_value"] = value if isinstance(value, (int, float)) else tuple(value)
    return DeviceParams(**kwargs)


@dataclass(frozen=True)
class NbdsBias:
    C: float
    I_dc: float
    tau_circuit: float


def _bias(tau_circuit: float, device: DeviceParams, dim: int) -> NbdsBias:
    ratio = bias_ratio(tau_circuit, device.k_n, device.k_p)
    fixed = device.fixed_value(dim)
    if device.policy == "fixed_I_dc":
        i_dc, c = fixed, ratio * fixed
    else:
        c, i_dc = fixed, fixed / ratio
    if c < C_MIN or i_dc < I_DC_MIN:
        raise NonPhysicalBias(
            f"dimension {dim}: tau={tau_circuit:.4g} s gives C={c:.4g} F, I_dc={i_dc:.4g} A "
            f"(limits C >= {C_MIN:g} F, I_dc >= {I_DC_MIN:g} A)")
    return NbdsBias(C=c, I_dc=i_dc, tau_circuit=tau_circuit)


def compute_bias(tau_model: float, units: UnitMap, device: DeviceParams, dim: int = 0) -> NbdsBias:
    """Capacitance and DC bias of the core realizing model time constant ``tau_model``."""
    if not (math.isfinite(tau_model) and tau_model > 0):
        raise ValueError(f"tau must be positive, got {tau_model!r}")
    return _bias(tau_model * units.time_scale, device, dim)


# ---------------------------------------------------------------------------
# Monomial decomposition
# ---------------------------------------------------------------------------

@dataclass
class _Monomial:
    coeff: float = 1.0
    num_consts: list[float] = field(default_factory=list)
    den_consts: list[float] = field(default_factory=list)
    signals: list[tuple[int, Expr]] = field(default_factory=list)
    guarded: list[tuple[int, Expr]] = field(default_factory=list)

    @property
    def constant_value(self) -> float:
        v = self.coeff
        for c in self.num_consts:
            v *= c
        for c in self.den_consts:
            v /= c
        return v


class _Builder:
    def __init__(self, system: DynamicalSystem, units: UnitMap):
        self.system = system
        self.params = dict(system.parameters)
        self.scale = units.current_per_unit
        self.blocks: list[Block] = []
        self.nets: list[Net] = []
        self.memo: dict[tuple, Any] = {}
        self.kind_count: dict[str, int] = {}
        self.state_net: dict[str, str] = {}

    # -- primitives ----------------------------------------------------------

    def new_net(self, polarity: str, sum_of: Sequence[str] | None = None) -> str:
        nid = f"n{len(self.nets)}"
        self.nets.append(Net(nid, polarity, None if sum_of is None else tuple(sum_of)))
        return nid

    def new_block(self, kind: str, params: dict, inputs: Mapping[str, str], outputs: Mapping[str, str]) -> Block:
        k = self.kind_count.get(kind, 0)
        self.kind_count[kind] = k + 1
        outs = {port: self.new_net(pol) for port, pol in outputs.items()}
        b = Block(f"{kind}{k}", kind, params, dict(inputs), outs)
        self.blocks.append(b)
        return b

    def cached(self, key: tuple, make):
        if key not in self.memo:
            self.memo[key] = make()
        return self.memo[key]

    def dc(self, amps: float) -> str:
        return self.cached(("DC", amps), lambda: self.new_block(
            "DCSOURCE", {"amps": amps}, {}, {"out": "plus"}).outputs["out"])

    def input(self, name: str) -> str:
        default = float(self.system.input_defaults.get(name, 0.0))
        return self.cached(("IN", name), lambda: self.new_block(
            "INPUT", {"name": name, "default": default}, {}, {"out": "bilateral-pair"}).outputs["out"])

    def splitter(self, name: str) -> tuple[str, str]:
        def make():
            b = self.new_block("SPLITTER", {}, {"in": self.input(name)},
                               {"plus": "plus", "minus": "minus"})
            return b.outputs["plus"], b.outputs["minus"]

        return self.cached(("SPLIT", name), make)

    def polarity(self, nid: str) -> str:
        return self.nets[int(nid[1:])].polarity

    def mirror(self, nid: str, gain: float) -> str:
        if gain == 1.0:
            return nid
        return self.cached(("MIR", nid, gain), lambda: self.new_block(
            "MIRROR", {"gain": gain, "role": "gain"}, {"in": nid},
            {"out": self.polarity(nid)}).outputs["out"])

    def mult(self, a: str, b: str, c: str) -> str:
        return self.cached(("MULT", a, b, c), lambda: self.new_block(
            "MULT", {}, {"in1": a, "in2": b, "in3": c}, {"out": "bilateral-pair"}).outputs["out"])

    def sum_net(self, terms: Sequence[str], polarity: str) -> str:
        return self.cached(("SUM", tuple(terms), polarity), lambda: self.new_net(polarity, terms))

    # -- expression realization ----------------------------------------------

    def is_const(self, e: Expr) -> bool:
        return is_constant(e, self.params)

    def value(self, e: Expr) -> float:
        return eval_expr(e, self.params)

    def decompose(self, e: Expr) -> _Monomial:
        mono = _Monomial()
        pos = itertools.count()

        def visit(node: Expr, inv: bool) -> None:
            if isinstance(node, Const):
                mono.coeff = mono.coeff / node.value if inv else mono.coeff * node.value
            elif isinstance(node, Neg):
                mono.coeff = -mono.coeff
                visit(node.child, inv)
            elif isinstance(node, Mul):
                for f in node.factors:
                    visit(f, inv)
            elif isinstance(node, Div):
                visit(node.num, inv)
                visit(node.den, not inv)
            elif isinstance(node, Pow):
                for _ in range(node.exp):
                    visit(node.base, inv)
            elif isinstance(node, Sym) and node.name in self.params:
                (mono.den_consts if inv else mono.num_consts).append(self.params[node.name])
                next(pos)
            elif self.is_const(node):
                v = self.value(node)
                mono.coeff = mono.coeff / v if inv else mono.coeff * v
            elif isinstance(node, Add) and inv:
                mono.guarded.append((next(pos), node))
            elif inv:
                raise UnsynthesizableExpression(validate_synthesizable(Div(Const(1.0), node), self.params))
            else:
                mono.signals.append((next(pos), node))

        visit(e, False)
        return mono

    def signal(self, e: Expr) -> str:
        if isinstance(e, Sym):
            if e.name in self.state_net:
                return self.state_net[e.name]
            return self.input(e.name)
        if isinstance(e, Add):
            return self.compound(e)
        net, gain = self.term(e)
        return self.dc(gain) if net is None else self.mirror(net, gain)

    def compound(self, e: Add) -> str:
        parts: list[str] = []
        split = split_terms(e)
        for terms, sign in ((split.positive_terms, 1.0), (split.negative_terms, -1.0)):
            for t in terms:
                net, gain = self.term(t)
                if net is None:
                    if gain:
                        parts.append(self.dc(sign * gain))
                else:
                    parts.append(self.mirror(net, sign * gain))
        return self.sum_net(parts, "bilateral-pair")

    def guarded(self, e: Add) -> str:
        bias = 0.0
        parts: list[str] = []
        for t in e.terms:
            if self.is_const(t):
                bias += self.value(t)
                continue
            net, gain = self.term(t)
            if net is None:
                bias += gain
            else:
                parts.append(self.mirror(net, gain))
        return self.sum_net([self.dc(bias)] + parts, "plus")

    def term(self, e: Expr) -> tuple[str | None, float]:
        """Realize a product/quotient as ``(net, gain)``; ``net is None`` for constants."""
        m = self.decompose(e)
        if not m.signals and not m.guarded:
            return None, m.constant_value
        sig = list(m.signals)
        dens = list(m.guarded)
        nc = list(m.num_consts)
        dcd = list(m.den_consts)
        gain = m.coeff

        if sig:
            acc = self.signal(sig.pop(0)[1])
        elif nc:
            acc = self.dc(nc.pop(0))
        else:
            acc = self.dc(self.scale)
            gain /= self.scale
        while sig or dens:
            if dens:
                dpos, dexpr = dens.pop(0)
                if sig and sig[0][0] < dpos:
                    second = self.signal(sig.pop(0)[1])
                elif nc:
                    second = self.dc(nc.pop(0))
                elif sig:
                    second = self.signal(sig.pop(0)[1])
                else:
                    second = self.dc(self.scale)
                    gain /= self.scale
                den = self.guarded(dexpr)
            else:
                second = self.signal(sig.pop(0)[1])
                if dcd:
                    den = self.dc(dcd.pop())
                else:
                    den = self.dc(self.scale)
                    gain *= self.scale
            acc = self.mult(acc, second, den)
        for v in nc:
            gain *= v
        for v in dcd:
            gain /= v
        return acc, gain

    def rail_term(self, t: Expr, sign: float, plus: list[str], minus: list[str]) -> None:
        m = self.decompose(t)
        if (len(m.signals) == 1 and not m.guarded and isinstance(m.signals[0][1], Sym)
                and m.signals[0][1].name in self.system.inputs):
            p, q = self.splitter(m.signals[0][1].name)
            g = sign * m.constant_value
            if g > 0:
                plus.append(self.mirror(p, g))
                minus.append(self.mirror(q, g))
            elif g < 0:
                plus.append(self.mirror(q, -g))
                minus.append(self.mirror(p, -g))
            return
        net, gain = self.term(t)
        gain *= sign
        if gain == 0:
            return
        rail = plus if gain > 0 else minus
        rail.append(self.dc(abs(gain)) if net is None else self.mirror(net, abs(gain)))


def _insert_copy_mirrors(netlist: Netlist) -> None:
    """Give each extra consumer of a net its own unity copy mirror."""
    count = sum(1 for b in netlist.blocks if b.kind == "MIRROR")
    nets = {n.id: n for n in netlist.nets}
    blocks = {b.id: b for b in netlist.blocks}
    next_net = len(netlist.nets)
    for nid, rs in readers(netlist).items():
        for kind, ref, slot in rs[1:]:
            out = f"n{next_net}"
            next_net += 1
            netlist.nets.append(Net(out, nets[nid].polarity))
            netlist.blocks.append(Block(f"MIRROR{count}", "MIRROR", {"gain": 1.0, "role": "copy"},
                                        {"in": nid}, {"out": out}))
            count += 1
            if kind == "block":
                blocks[ref].inputs[slot] = out
            else:
                s = nets[ref]
                members = list(s.sum_of)
                members[slot] = out
                s.sum_of = tuple(members)


def synthesize(system: DynamicalSystem, device: DeviceParams = DeviceParams(),
               units: UnitMap = UnitMap()) -> Netlist:
    """Map an electrical-domain system onto NBDS, MULT, mirror and source blocks.

    ``units.current_per_unit`` is the scale current used where a product of
    signals has no constant to divide by.
    """
    if system.domain != "electrical":
        raise ValueError("synthesize expects an electrical-domain system; convert it with to_electrical")
    diags = []
    for st in system.states:
        diags += validate_synthesizable(st.rhs, system.parameters)
    if diags:
        raise UnsynthesizableExpression(diags)

    b = _Builder(system, units)
    cores = []
    for dim, st in enumerate(system.states):
        bias = _bias(st.tau, device, dim)
        s = device.headroom(dim, bias.I_dc)
        if abs(st.initial_value) > s * s:
            raise RangeViolation(st.initial_value, s)
        core = b.new_block("NBDS", {
            "state": st.name, "dimension": dim, "C": bias.C, "I_dc": bias.I_dc,
            "tau": st.tau, "S": s, "init": float(st.initial_value),
        }, {}, {"out": "bilateral-pair"})
        b.state_net[st.name] = core.outputs["out"]
        cores.append(core)

    for core, st in zip(cores, system.states):
        plus: list[str] = []
        minus: list[str] = []
        split = split_terms(st.rhs)
        for t in split.positive_terms:
            b.rail_term(t, 1.0, plus, minus)
        for t in split.negative_terms:
            b.rail_term(t, -1.0, plus, minus)
        core.inputs = {"plus": b.new_net("plus", plus), "minus": b.new_net("minus", minus)}

    for st in system.states:
        b.new_block("OUTPUT", {"name": st.name}, {"in": b.state_net[st.name]}, {})

    netlist = Netlist(
        name=system.name,
        blocks=b.blocks,
        nets=b.nets,
        device={"k_n": device.k_n, "k_p": device.k_p},
        meta={"current_per_unit": units.current_per_unit, "time_scale": units.time_scale},
    )
    _insert_copy_mirrors(netlist)
    netlist.census = census_of(netlist.blocks)
    assert all(set(bl.inputs) == set(PORTS[bl.kind][0]) for bl in netlist.blocks)
    return netlist
