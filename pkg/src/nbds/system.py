"""Dynamical systems in canonical ``tau * dx/dt = F(x, u)`` form.

A :class:`DynamicalSystem` lives either in the *model* domain (biological
units, model seconds) or in the *electrical* domain (amperes, circuit
seconds).  :func:`to_electrical` converts between the two; the symbol names
stay the same.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from typing import Any, Mapping

import jsonschema

from .errors import NonPositiveTau, SchemaError, UnknownModel, UnknownSymbol
from .expr import (
    SYMBOL_RE,
    Add,
    Const,
    Div,
    Expr,
    Mul,
    Neg,
    Pow,
    Sym,
    parse_expr,
    symbols,
    to_text,
)
from .errors import ParseError

MODEL_SCHEMA = {
    "type": "object",
    "required": ["name", "states"],
    "properties": {
        "name": {"type": "string", "minLength": 1},
        "states": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["name", "tau", "rhs"],
                "properties": {
                    "name": {"type": "string"},
                    "tau": {"type": "number"},
                    "rhs": {"type": "string"},
                    "init": {"type": "number"},
                },
                "additionalProperties": False,
            },
        },
        "inputs": {"type": "array", "items": {"type": "string"}},
        "params": {"type": "object", "additionalProperties": {"type": "number"}},
        "dimensionless": {"type": "array", "items": {"type": "string"}},
        "input_defaults": {"type": "object", "additionalProperties": {"type": "number"}},
    },
    "additionalProperties": False,
}


@dataclass(frozen=True)
class UnitMap:
    """Biological-to-electrical scaling: one model unit is ``current_per_unit`` amperes."""

    current_per_unit: float = 1e-6
    time_scale: float = 1e-3

    def __post_init__(self):
        for name in ("current_per_unit", "time_scale"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be positive and finite, got {v!r}")


IDENTITY_UNITS = UnitMap(1.0, 1.0)


@dataclass(frozen=True)
class StateEquation:
    name: str
    tau: float
    rhs: Expr
    initial_value: float = 0.0


@dataclass(frozen=True)
class DynamicalSystem:
    name: str
    states: tuple[StateEquation, ...]
    inputs: tuple[str, ...] = ()
    parameters: Mapping[str, float] = field(default_factory=dict)
    # Parameters that stay unit-free under to_electrical (rates, gains, fractions).
    dimensionless: frozenset[str] = frozenset()
    input_defaults: Mapping[str, float] = field(default_factory=dict)
    domain: str = "model"

    def __post_init__(self):
        object.__setattr__(self, "states", tuple(self.states))
        object.__setattr__(self, "inputs", tuple(self.inputs))
        object.__setattr__(self, "parameters", dict(self.parameters))
        object.__setattr__(self, "dimensionless", frozenset(self.dimensionless))
        object.__setattr__(self, "input_defaults", dict(self.input_defaults))
        self._check()

    def _check(self) -> None:
        if not self.states:
            raise SchemaError(f"system {self.name!r} has no states")
        if self.domain not in ("model", "electrical"):
            raise SchemaError(f"unknown domain {self.domain!r}")
        names = [s.name for s in self.states] + list(self.inputs) + list(self.parameters)
        for n in names:
            if not SYMBOL_RE.fullmatch(n):
                raise SchemaError(f"invalid symbol name {n!r}")
        seen: set[str] = set()
        for n in names:
            if n in seen:
                raise SchemaError(f"symbol {n!r} declared more than once")
            seen.add(n)
        for n in self.dimensionless:
            if n not in self.parameters:
                raise SchemaError(f"dimensionless entry {n!r} is not a parameter")
        for n in self.input_defaults:
            if n not in self.inputs:
                raise SchemaError(f"input default given for undeclared input {n!r}")
        for st in self.states:
            if not (math.isfinite(st.tau) and st.tau > 0):
                raise NonPositiveTau(st.name, st.tau)
            for sym in sorted(symbols(st.rhs)):
                if sym not in seen:
                    raise UnknownSymbol(sym, st.name)

    @property
    def state_names(self) -> tuple[str, ...]:
        return tuple(s.name for s in self.states)

    @property
    def dimension(self) -> int:
        return len(self.states)

    def state(self, name: str) -> StateEquation:
        for s in self.states:
            if s.name == name:
                return s
        raise KeyError(name)

    def to_document(self) -> dict[str, Any]:
        doc: dict[str, Any] = {
            "name": self.name,
            "states": [
                {"name": s.name, "tau": s.tau, "rhs": to_text(s.rhs), "init": s.initial_value}
                for s in self.states
            ],
            "inputs": list(self.inputs),
            "params": dict(self.parameters),
        }
        if self.dimensionless:
            doc["dimensionless"] = sorted(self.dimensionless)
        if self.input_defaults:
            doc["input_defaults"] = dict(self.input_defaults)
        return doc


def canonicalize(tau: float, rhs: Expr) -> tuple[float, Expr]:
    """Absorb a leading positive constant factor of ``rhs`` into ``tau``.

    ``tau * x' = c * g``  becomes  ``(tau / c) * x' = g``.
    """
    if isinstance(rhs, Mul):
        head = rhs.factors[0]
        if isinstance(head, Const) and head.value > 0:
            rest = rhs.factors[1:]
            return tau / head.value, rest[0] if len(rest) == 1 else Mul(rest)
    return tau, rhs


def load_system(document: str | Mapping[str, Any], canonical: bool = True) -> DynamicalSystem:
    """Build a validated system from a model document (JSON text or parsed mapping)."""
    if isinstance(document, str):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"model file is not valid JSON: {exc}") from None
    try:
        jsonschema.validate(document, MODEL_SCHEMA)
    except jsonschema.ValidationError as exc:
        path = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise SchemaError(f"{path}: {exc.message}") from None

    states = []
    for sd in document["states"]:
        try:
            rhs = parse_expr(sd["rhs"])
        except ParseError as exc:
            raise SchemaError(f"state {sd['name']!r}: {exc}") from exc
        tau = float(sd["tau"])
        if not (math.isfinite(tau) and tau > 0):
            raise NonPositiveTau(sd["name"], tau)
        if canonical:
            tau, rhs = canonicalize(tau, rhs)
        states.append(StateEquation(sd["name"], tau, rhs, float(sd.get("init", 0.0))))
    return DynamicalSystem(
        name=document["name"],
        states=tuple(states),
        inputs=tuple(document.get("inputs", ())),
        parameters={k: float(v) for k, v in document.get("params", {}).items()},
        dimensionless=frozenset(document.get("dimensionless", ())),
        input_defaults={k: float(v) for k, v in document.get("input_defaults", {}).items()},
    )


# ---------------------------------------------------------------------------
# Built-in models
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FhnParams:
    """FitzHugh-Nagumo constants; scale currents are model-unit multiples of ``I_x``."""

    a_recovery: float = 0.18
    offset: float = 0.7
    w_gain: float = 0.8
    cubic_divisor: float = 3.0

    def scale_currents(self, units: UnitMap = IDENTITY_UNITS) -> dict[str, float]:
        cpu = units.current_per_unit
        return {
            "I_x": cpu,
            "I_b": self.cubic_divisor * cpu,
            "I_c": self.offset * cpu,
            "I_d": self.w_gain * cpu,
        }


@dataclass(frozen=True)
class AstrocyteParams:
    """Two-pool calcium model with Hill coefficients m = n = p = 1."""

    z0: float
    z1: float
    beta_stim: float
    V_M2: float
    V_M3: float
    K_2: float
    K_R: float
    K_A: float
    k_f: float
    k: float

    def __post_init__(self):
        for name in ("z0", "z1", "V_M2", "V_M3", "K_2", "K_R", "K_A", "k_f", "k"):
            if not getattr(self, name) > 0:
                raise ValueError(f"astrocyte parameter {name} must be positive")
        if not 0.0 <= self.beta_stim <= 1.0:
            raise ValueError("beta_stim must lie in [0, 1]")

    @classmethod
    def defaults(cls) -> AstrocyteParams:
        return cls(**_astrocyte_defaults()["params"])


def _astrocyte_defaults() -> dict:
    text = resources.files("nbds").joinpath("data/astrocyte_defaults.json").read_text()
    return json.loads(text)


def _synapse(initial=None) -> DynamicalSystem:
    init = {"s": 0.0, **(initial or {})}
    return DynamicalSystem(
        name="synapse",
        states=(StateEquation("s", 1.0, parse_expr("-s + I_ext"), init["s"]),),
        inputs=("I_ext",),
        input_defaults={"I_ext": 1.0},
    )


def _fhn(params: FhnParams | None = None, initial=None) -> DynamicalSystem:
    p = params or FhnParams()
    init = {"v": 0.0, "w": 0.0, **(initial or {})}
    tau_w, rhs_w = canonicalize(
        1.0, Mul((Const(p.a_recovery), parse_expr("v + I_c - I_d*w/I_x")))
    )
    return DynamicalSystem(
        name="fhn",
        states=(
            StateEquation("v", 1.0, parse_expr("v - v^3/(I_b*I_x) - w + I_ext"), init["v"]),
            StateEquation("w", tau_w, rhs_w, init["w"]),
        ),
        inputs=("I_ext",),
        parameters=p.scale_currents(),
        input_defaults={"I_ext": 0.5},
    )


_ASTRO_X = "z0 + z1*beta_stim - V_M2*X/(K_2 + X) + V_M3*Y/(K_R + Y)*X/(K_A + X) + k_f*Y - k*X"
_ASTRO_Y = "V_M2*X/(K_2 + X) - V_M3*Y/(K_R + Y)*X/(K_A + X) - k_f*Y"


def _astrocyte(params: AstrocyteParams | None = None, initial=None) -> DynamicalSystem:
    p = params or AstrocyteParams.defaults()
    init = {**_astrocyte_defaults()["init"], **(initial or {})}
    return DynamicalSystem(
        name="astrocyte",
        states=(
            StateEquation("X", 1.0, parse_expr(_ASTRO_X), init["X"]),
            StateEquation("Y", 1.0, parse_expr(_ASTRO_Y), init["Y"]),
        ),
        parameters=asdict(p),
        dimensionless={"beta_stim", "k_f", "k"},
    )


BUILTINS = {"synapse": _synapse, "fhn": _fhn, "astrocyte": _astrocyte}


def builtin(name: str, params=None, initial: Mapping[str, float] | None = None) -> DynamicalSystem:
    """Return one of the shipped models (``synapse``, ``fhn``, ``astrocyte``)."""
    try:
        factory = BUILTINS[name]
    except KeyError:
        raise UnknownModel(f"unknown built-in model {name!r}; choose from {sorted(BUILTINS)}") from None
    if name == "synapse":
        if params is not None:
            raise ValueError("the synapse model has no parameters")
        return factory(initial)
    return factory(params, initial)


# ---------------------------------------------------------------------------
# Model -> electrical domain
# ---------------------------------------------------------------------------

def _scaled(term: Expr, shift: int, scale: Sym) -> Expr:
    # Multiply (shift > 0) or divide (shift < 0) by scale**|shift|.
    if shift == 0:
        return term
    if isinstance(term, Neg):
        return Neg(_scaled(term.child, shift, scale))
    factor = scale if abs(shift) == 1 else Pow(scale, abs(shift))
    if shift > 0:
        if isinstance(term, Mul):
            return Mul(term.factors + (factor,))
        return Mul((term, factor))
    return Div(term, factor)


class _Rescaler:
    """Insert scale-current factors so every sum adds currents of equal dimension.

    A node with current-dimension ``d`` represents ``cpu**d`` times its
    model-domain value; top-level right-hand sides are brought to ``d = 1``.
    """

    def __init__(self, dimless: frozenset[str], scale: Sym):
        self.dimless = dimless
        self.scale = scale
        self.used = False

    def __call__(self, e: Expr) -> tuple[Expr, int]:
        if isinstance(e, Const):
            return e, 0
        if isinstance(e, Sym):
            return e, 0 if e.name in self.dimless else 1
        if isinstance(e, Neg):
            c, d = self(e.child)
            return Neg(c), d
        if isinstance(e, Mul):
            parts = [self(f) for f in e.factors]
            return Mul(tuple(p for p, _ in parts)), sum(d for _, d in parts)
        if isinstance(e, Div):
            (n, dn), (q, dq) = self(e.num), self(e.den)
            return Div(n, q), dn - dq
        if isinstance(e, Pow):
            b, d = self(e.base)
            return Pow(b, e.exp), d * e.exp
        if isinstance(e, Add):
            parts = [self(t) for t in e.terms]
            return self.align(parts, max(d for _, d in parts)), max(d for _, d in parts)
        raise TypeError(e)

    def align(self, parts, target: int) -> Expr:
        out = []
        for t, d in parts:
            if d != target:
                self.used = True
            out.append(_scaled(t, target - d, self.scale))
        return out[0] if len(out) == 1 else Add(tuple(out))

    def top(self, rhs: Expr) -> Expr:
        if isinstance(rhs, Add):
            return self.align([self(t) for t in rhs.terms], 1)
        return self.align([self(rhs)], 1)


def _fresh_name(base: str, taken: set[str]) -> str:
    name, i = base, 1
    while name in taken:
        name = f"{base}_{i}"
        i += 1
    return name


def to_electrical(system: DynamicalSystem, units: UnitMap = UnitMap()) -> DynamicalSystem:
    """Map a model-domain system onto currents (amperes) and circuit time (seconds).

    Every state, input and non-dimensionless parameter value is multiplied by
    ``units.current_per_unit`` and every tau by ``units.time_scale``.  Terms
    whose current dimension is not one get explicit scale-current factors, so
    the electrical right-hand side evaluated at scaled arguments equals the
    scaled model right-hand side.
    """
    if system.domain == "electrical":
        return system
    cpu = units.current_per_unit
    taken = set(system.state_names) | set(system.inputs) | set(system.parameters)
    scale = Sym(_fresh_name("I_scale", taken))
    rescale = _Rescaler(system.dimensionless, scale)
    states = tuple(
        StateEquation(s.name, s.tau * units.time_scale, rescale.top(s.rhs), s.initial_value * cpu)
        for s in system.states
    )
    params = {
        k: (v if k in system.dimensionless else v * cpu) for k, v in system.parameters.items()
    }
    if rescale.used:
        params[scale.name] = cpu
    return replace(
        system,
        states=states,
        parameters=params,
        input_defaults={k: v * cpu for k, v in system.input_defaults.items()},
        domain="electrical",
    )
