"""Current-mode NBDS synthesis compiler and behavioral simulator."""

from .errors import NbdsError
from .expr import Expr, eval_expr, parse_expr, split_terms, to_text, validate_synthesizable
from .netlist import Netlist, export_dot, export_json, import_json, validate_netlist
from .simulate import (
    CompareReport,
    Constant,
    Piecewise,
    SimConfig,
    Step,
    Trace,
    compare_traces,
    estimate_period,
    integrate_netlist,
    integrate_reference,
    recover_branch_currents,
)
from .synthesis import DeviceParams, NbdsBias, compute_bias, synthesize
from .system import DynamicalSystem, StateEquation, UnitMap, builtin, load_system, to_electrical

__all__ = [
    "CompareReport", "Constant", "DeviceParams", "DynamicalSystem", "Expr", "NbdsBias", "NbdsError",
    "Netlist", "Piecewise", "SimConfig", "StateEquation", "Step", "Trace", "UnitMap", "builtin",
    "compare_traces", "compute_bias", "estimate_period", "eval_expr", "export_dot", "export_json",
    "import_json", "integrate_netlist", "integrate_reference", "load_system", "parse_expr",
    "recover_branch_currents", "split_terms", "synthesize", "to_electrical", "to_text",
    "validate_netlist", "validate_synthesizable",
]
