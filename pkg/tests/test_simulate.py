import io
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nbds.errors import GridMismatch, NonFiniteState, RangeViolation, SchemaError
from nbds.synthesis import DeviceParams, synthesize
from nbds.simulate import (
    Constant,
    Event,
    Piecewise,
    SimConfig,
    Step,
    Trace,
    compare_traces,
    estimate_period,
    integrate_netlist,
    integrate_reference,
    read_trace_csv,
    recover_branch_currents,
    trace_to_csv,
    write_trace_csv,
)
from nbds.system import DynamicalSystem, StateEquation, UnitMap, builtin, load_system, to_electrical

UNITS = UnitMap(1e-6, 1e-3)


def _elec(name, **kw):
    return to_electrical(builtin(name, **kw), UNITS)


# --- branch currents --------------------------------------------------------

def test_branch_recovery_examples():
    assert recover_branch_currents(0.0, 2.0) == (1.0, 1.0)
    ia, ib = recover_branch_currents(1.2, 2.0)
    assert ia == pytest.approx(0.49, abs=1e-15) and ib == pytest.approx(1.69, abs=1e-15)
    assert recover_branch_currents(4.0, 2.0) == (0.0, 4.0)
    with pytest.raises(RangeViolation):
        recover_branch_currents(4.0001, 2.0)
    with pytest.raises(ValueError):
        recover_branch_currents(0.0, 0.0)


@given(s=st.floats(1e-4, 1e2), frac=st.floats(-1.0, 1.0))
def test_branch_recovery_properties(s, frac):
    i_out = frac * s * s
    ia, ib = recover_branch_currents(i_out, s)
    assert ia >= 0 and ib >= 0
    assert math.sqrt(ia) + math.sqrt(ib) == pytest.approx(s, rel=1e-12)
    assert ib - ia == pytest.approx(i_out, rel=1e-12, abs=1e-12 * s * s)


# --- configuration and drives -----------------------------------------------

def test_config_validation():
    with pytest.raises(ValueError):
        SimConfig(0.0, 1.0)
    with pytest.raises(ValueError):
        SimConfig(1e-3, -1.0)
    with pytest.raises(ValueError):
        SimConfig(1e-12, 1.0)
    with pytest.raises(ValueError):
        SimConfig(1e-3, 1.0, record_stride=0)
    assert SimConfig(1e-3, 1.0).n_steps == 1000
    assert SimConfig(0.1, 0.3).n_steps == 3


def test_drives():
    assert Constant(2.0)(5.0) == 2.0
    s = Step(1.0, 3.0)
    assert (s(0.999), s(1.0), s(2.0)) == (0.0, 3.0, 3.0)
    p = Piecewise(((0.0, 0.0), (1.0, 2.0), (3.0, 0.0)))
    assert (p(-1), p(0.5), p(2.0), p(9)) == (0.0, 1.0, 1.0, 0.0)
    with pytest.raises(ValueError):
        Piecewise(((1.0, 0.0), (1.0, 1.0)))


def test_undeclared_drive_rejected():
    with pytest.raises(SchemaError):
        integrate_reference(_elec("synapse"), SimConfig(1e-5, 1e-4, inputs={"I_syn": Constant(1.0)}))


# --- reference integrator ---------------------------------------------------

def test_synapse_step_response_at_tau():
    cfg = SimConfig(1e-6, 1e-3, inputs={"I_ext": Step(0.0, 1e-6)})
    tr = integrate_reference(_elec("synapse"), cfg)
    assert tr.times[-1] == pytest.approx(1e-3)
    assert tr.values[-1, 0] == pytest.approx((1 - math.exp(-1)) * 1e-6, rel=1e-9)


def test_rk4_fourth_order_on_synapse():
    want = (1 - math.exp(-1)) * 1e-6
    errs = []
    for dt in (1e-4, 5e-5):
        tr = integrate_reference(_elec("synapse"), SimConfig(dt, 1e-3, inputs={"I_ext": Constant(1e-6)}))
        errs.append(abs(tr.values[-1, 0] - want))
    assert 14.0 < errs[0] / errs[1] < 18.0


def test_zero_duration_returns_initial_state():
    e = _elec("fhn", initial={"v": 0.3, "w": -0.2})
    for tr in (integrate_reference(e, SimConfig(1e-5, 0.0)),
               integrate_netlist(synthesize(e, DeviceParams(), UNITS), SimConfig(1e-5, 0.0))):
        assert tr.times.tolist() == [0.0]
        assert tr.values[0].tolist() == pytest.approx([0.3e-6, -0.2e-6], rel=1e-15)


def test_record_stride():
    tr = integrate_reference(_elec("synapse"), SimConfig(1e-5, 1e-3, record_stride=10))
    assert len(tr) == 11
    assert np.allclose(np.diff(tr.times), 1e-4, rtol=1e-9)


def test_non_finite_state_carries_partial_trace():
    m = load_system({"name": "blowup", "states": [{"name": "x", "tau": 1, "rhs": "x*x*x", "init": 1}]})
    with pytest.raises(NonFiniteState) as info:
        integrate_reference(m, SimConfig(0.1, 100.0))
    tr = info.value.trace
    assert len(tr) >= 1 and tr.events[-1].kind == "NonFiniteState"
    assert np.all(np.isfinite(tr.values))


# --- netlist integrator -----------------------------------------------------

def test_synapse_netlist_matches_reference():
    e = _elec("synapse")
    cfg = SimConfig(1e-6, 10e-3, inputs={"I_ext": Step(0.0, 1e-6)})
    ref = integrate_reference(e, cfg)
    net = integrate_netlist(synthesize(e, DeviceParams(), UNITS), cfg)
    rep = compare_traces(ref, net)
    assert rep.rel_rmse <= 1e-9
    assert net.events == ()


def test_conservation_at_every_step():
    e = _elec("fhn")
    n = synthesize(e, DeviceParams(), UNITS)
    tr = integrate_netlist(n, SimConfig(1e-5, 30e-3, inputs={"I_ext": Constant(0.5e-6)}))
    S = np.array([b.params["S"] for b in n.nbds])
    sums = np.sqrt(tr.branches[:, :, 0]) + np.sqrt(tr.branches[:, :, 1])
    assert np.max(np.abs(sums - S) / S) <= 1e-12
    assert np.max(np.abs(tr.branches[:, :, 1] - tr.branches[:, :, 0] - tr.values)) <= 1e-12 * np.max(S ** 2)


def test_zero_synapse_stays_zero():
    e = _elec("synapse")
    tr = integrate_netlist(synthesize(e, DeviceParams(), UNITS),
                           SimConfig(1e-5, 5e-3, inputs={"I_ext": Constant(0.0)}))
    assert np.all(tr.values == 0.0)
    assert tr.events == ()


def test_equilibrium_held_by_both_integrators():
    e = _elec("synapse", initial={"s": 0.7})
    cfg = SimConfig(1e-6, 1e-2, inputs={"I_ext": Constant(0.7e-6)})
    assert cfg.n_steps == 10_000
    for tr in (integrate_reference(e, cfg), integrate_netlist(synthesize(e, DeviceParams(), UNITS), cfg)):
        assert np.max(np.abs(tr.values[:, 0] - 0.7e-6)) <= 1e-12 * 0.7e-6


def test_small_headroom_clamps_and_logs_once_per_excursion():
    e = _elec("synapse")
    n = synthesize(e, DeviceParams(S=(math.sqrt(0.5e-6),)), UNITS)
    tr = integrate_netlist(n, SimConfig(1e-5, 10e-3, inputs={"I_ext": Constant(1e-6)}))
    assert [ev.kind for ev in tr.events] == ["RangeViolation"]
    assert np.max(tr.values) == pytest.approx(0.5e-6, rel=1e-15)
    t_cross = -1e-3 * math.log(0.5)  # s(t) = 1 - exp(-t/tau) reaches 0.5
    assert abs(tr.events[0].time - t_cross) <= 2e-5


def test_initial_state_outside_range():
    e = _elec("synapse", initial={"s": 5.0})
    n = synthesize(e, DeviceParams(), UNITS)
    n.nbds[0].params["S"] = 1e-3
    with pytest.raises(RangeViolation):
        integrate_netlist(n, SimConfig(1e-5, 1e-4))


def test_denominator_floor_event():
    # Remove the bias of x/(K + y) so the denominator collapses to y = 0.
    m = load_system({"name": "hill", "params": {"K": 2.5},
                     "states": [{"name": "x", "tau": 1, "rhs": "1 - x/(K + y)", "init": 0.5},
                                {"name": "y", "tau": 1, "rhs": "-y"}]})
    n = synthesize(to_electrical(m, UNITS), DeviceParams(), UNITS)
    (bias,) = [b for b in n.of_kind("DCSOURCE") if b.params["amps"] == pytest.approx(2.5e-6)]
    bias.params["amps"] = 0.0
    tr = integrate_netlist(n, SimConfig(1e-5, 1e-4))
    floors = [ev for ev in tr.events if ev.kind == "DenominatorFloor"]
    assert len(floors) == 1 and floors[0].time == 0.0
    assert np.all(np.isfinite(tr.values))


def test_netlist_run_is_deterministic():
    e = _elec("astrocyte")
    n = synthesize(e, DeviceParams(), UNITS)
    cfg = SimConfig(1e-5, 5e-3)
    a, b = integrate_netlist(n, cfg), integrate_netlist(n, cfg)
    assert trace_to_csv(a) == trace_to_csv(b)
    assert np.array_equal(a.values, b.values)


def test_canonical_and_raw_fhn_agree():
    raw = load_system({
        "name": "fhn_raw",
        "states": [{"name": "v", "tau": 1, "rhs": "v - v^3/3 - w + I_ext", "init": 0},
                   {"name": "w", "tau": 1, "rhs": "0.18*(v + 0.7 - 0.8*w)", "init": 0}],
        "inputs": ["I_ext"],
    }, canonical=False)
    canon = load_system(raw.to_document(), canonical=True)
    assert raw.state("w").tau == 1.0 and canon.state("w").tau != 1.0
    cfg = SimConfig(1e-2, 30.0, inputs={"I_ext": Constant(0.5)})
    rep = compare_traces(integrate_reference(raw, cfg), integrate_reference(canon, cfg))
    assert rep.rel_rmse <= 1e-9


# --- comparison and periods -------------------------------------------------

def _sine_trace(period=10e-3, dt=1e-5, n=5001, offset=0.0):
    t = np.arange(n) * dt
    return Trace(t, ("x",), (np.sin(2 * np.pi * t / period) + offset).reshape(-1, 1))


def test_estimate_period_of_sine():
    tr = _sine_trace()
    assert estimate_period(tr, "x", 0.0) == pytest.approx(10e-3, abs=1e-5)


def test_estimate_period_none_for_constant():
    tr = Trace(np.arange(100) * 1e-3, ("x",), np.ones((100, 1)))
    assert estimate_period(tr, "x", 0.5) is None


def test_compare_identity_and_offset():
    a = _sine_trace()
    rep = compare_traces(a, a)
    assert rep.rmse == 0 and rep.max_abs_err == 0 and rep.rel_rmse == 0
    rep = compare_traces(a, _sine_trace(offset=1e-6))
    assert rep.max_abs_err == pytest.approx(1e-6, rel=1e-6)
    assert rep.period_ref == pytest.approx(rep.period_test, rel=1e-6)


def test_compare_grid_mismatch():
    with pytest.raises(GridMismatch):
        compare_traces(_sine_trace(), _sine_trace(n=4000))
    with pytest.raises(GridMismatch):
        compare_traces(_sine_trace(), _sine_trace(dt=2e-5))
    other = Trace(np.arange(3.0), ("y",), np.zeros((3, 1)))
    with pytest.raises(GridMismatch):
        compare_traces(Trace(np.arange(3.0), ("x",), np.zeros((3, 1))), other)


# --- CSV --------------------------------------------------------------------

def test_csv_round_trip_full_precision(tmp_path):
    tr = Trace(np.array([0.0, 1e-3]), ("v", "w"), np.array([[0.1, 1 / 3], [math.pi * 1e-6, -2.5e-7]]),
               (Event(1e-3, "RangeViolation", "v out of range, clamped"),))
    text = trace_to_csv(tr)
    assert text.splitlines()[0] == "t_s,v_A,w_A"
    assert text.splitlines()[-1] == "# event,0.001,RangeViolation,v out of range, clamped"
    p = tmp_path / "t.csv"
    with open(p, "w") as fh:
        write_trace_csv(tr, fh)
    back = read_trace_csv(p)
    assert back.names == tr.names
    assert np.array_equal(back.values, tr.values) and np.array_equal(back.times, tr.times)
    assert back.events == tr.events
    assert read_trace_csv(text).names == ("v", "w")


def test_csv_reader_rejects_garbage():
    with pytest.raises(SchemaError):
        read_trace_csv("time,x\n0,1\n")
    with pytest.raises(SchemaError):
        read_trace_csv("t_s,x_A\n0,1,2\n")


def test_generic_system_without_inputs():
    sys_ = DynamicalSystem("decay", (StateEquation("x", 2.0, load_system(
        {"name": "d", "states": [{"name": "x", "tau": 1, "rhs": "-x"}]}).states[0].rhs, 1.0),))
    tr = integrate_reference(sys_, SimConfig(1e-3, 2.0))
    assert tr.values[-1, 0] == pytest.approx(math.exp(-1), rel=1e-10)
    buf = io.StringIO()
    write_trace_csv(tr, buf)
    assert buf.getvalue().count("\n") == len(tr) + 1
