import math

import numpy as np
import pytest

from portforge.circuit import (Capacitor, Diode, EMPort, Inductor, Netlist, NewtonConfig, Resistor,
                               TransientSolver, VoltageSource, assemble_transient_system, diode_iv,
                               format_element, parse_netlist, shockley, solve_transient,
                               solve_transient_batch, thermal_voltage)
from portforge.circuit.devices import EXP_CLAMP
from portforge.emport import PortResponse
from portforge.errors import Divergence, InvalidArgument, NetlistError, StructuralSingularity
from portforge.signals import SourceSpec


# -- parsing -------------------------------------------------------------------------------

def test_parse_examples():
    net = parse_netlist("R1 1 0 50")
    (r,) = net.elements
    assert (r.name, r.n_plus, r.n_minus, r.R) == ("R1", 1, 0, 50.0)
    (d,) = parse_netlist("D1 2 0 IS=1e-9 N=1 T=293").elements
    assert (d.Is, d.n, d.T) == (1e-9, 1.0, 293.0)
    (p,) = parse_netlist("P1 1 0 PORT=0").elements
    assert isinstance(p, EMPort) and p.port_id == 0


def test_parse_full_grammar():
    text = """
    # feed
    V1 1 0 F0=10e9 FBW=2e9 AMP=2 DELAY=3
    R1 1 2 1k          # series
    C1 2 0 5.4p
    L1 2 3 1n
    D1 3 0
    V2 4 0 DC=1.5
    R2 4 0 1meg
    P1 3 0 PORT=1
    """
    net = parse_netlist(text)
    assert net.node_count == 5
    v1 = net.element("V1")
    assert v1.spec == SourceSpec(10e9, 2e9, 2.0, 3)
    assert net.element("R1").R == 1e3
    assert net.element("C1").C == pytest.approx(5.4e-12)
    assert net.element("R2").R == 1e6
    assert net.element("V2").dc == 1.5
    assert net.element("D1").Is == 4.86e-9
    assert net.ports[0].port_id == 1
    assert not net.is_linear


def test_text_round_trip():
    net = parse_netlist("V1 1 0 F0=1e9 FBW=5e8 AMP=1 DELAY=2\nR1 1 2 50\nC1 2 0 1p\n"
                        "L1 2 3 2n\nD1 3 0 IS=2e-9 N=1.1 T=290\nP1 3 0 PORT=0\n")
    assert parse_netlist(net.to_text()) == net
    assert format_element(net.element("R1")) == "R1 1 2 50.0"


@pytest.mark.parametrize("text,line", [
    ("R1 1 0 50\nX1 1 0 3", 2),
    ("R1 1 0 -5", 1),
    ("R1 1 0 50\nR1 1 0 60", 2),
    ("D1 1 0 T=500", 1),
    ("D1 1 0 N=0.5", 1),
    ("C1 1 0 abc", 1),
    ("V1 1 0 F0=1e9", 1),
    ("P1 1 0", 1),
    ("R1 a 0 50", 1),
])
def test_parse_errors_carry_line_numbers(text, line):
    with pytest.raises(NetlistError) as info:
        parse_netlist(text)
    assert info.value.line == line


def test_netlist_invariants():
    with pytest.raises(NetlistError):
        parse_netlist("R1 1 2 50")  # nothing touches ground
    with pytest.raises(NetlistError):
        parse_netlist("")
    with pytest.raises(NetlistError):
        parse_netlist("P1 1 0 PORT=0\nP2 2 0 PORT=0\nR1 1 2 5")


# -- devices -------------------------------------------------------------------------------

def test_thermal_voltage_values():
    assert thermal_voltage(293.15) == pytest.approx(25.26e-3, abs=0.01e-3)
    assert thermal_voltage(285.0) == pytest.approx(24.56e-3, abs=0.01e-3)
    assert thermal_voltage(600.0) == pytest.approx(2 * thermal_voltage(300.0), rel=1e-15)
    with pytest.raises(InvalidArgument):
        thermal_voltage(0.0)


def test_diode_iv_cases():
    d = Diode("D1", 1, 0, Is=1e-9, n=1.05, T=300.0)
    nvt = d.n * thermal_voltage(d.T)
    i, g = diode_iv(0.0, d)
    assert i == 0.0 and g == pytest.approx(d.Is / nvt)
    i, _ = diode_iv(nvt * math.log(2.0), d)
    assert i == pytest.approx(d.Is, rel=1e-12)
    i, g = diode_iv(-5.0, d)
    assert i == pytest.approx(-d.Is, rel=1e-12) and g >= 0
    with pytest.raises(InvalidArgument):
        diode_iv(math.nan, d)


def test_diode_clamp_is_tangent_continuation():
    Is, n, T = 1e-9, 1.0, 300.0
    nvt = thermal_voltage(T)
    v_c = EXP_CLAMP * nvt
    i_c, g_c = shockley(v_c, Is, n, T)
    i, g = shockley(v_c + 0.1, Is, n, T)
    assert np.isfinite(i) and g == pytest.approx(g_c)
    assert i == pytest.approx(i_c + g_c * 0.1, rel=1e-12)
    i_big, _ = shockley(1e3, Is, n, T)
    assert np.isfinite(i_big)


# -- assembly and linear transients -------------------------------------------------------------

def test_single_resistor_across_source():
    net = parse_netlist("V1 1 0 DC=2.5\nR1 1 0 10")
    st = assemble_transient_system(net, 1e-9)
    assert st.size == 2
    r = solve_transient(net, 1e-9, 5)
    np.testing.assert_allclose(r.node_v[1], 2.5)
    np.testing.assert_allclose(r.branch_i["V1"], -0.25)
    assert np.all(r.newton_iteration_counts == 1)


def test_structural_errors():
    with pytest.raises(StructuralSingularity):
        assemble_transient_system(Netlist(4, (Resistor("R1", 1, 0, 1.0), Resistor("R2", 2, 3, 1.0))), 1e-9)
    with pytest.raises(StructuralSingularity):
        assemble_transient_system(parse_netlist("V1 1 0 DC=1\nV2 1 0 DC=2\nR1 1 0 5"), 1e-9)
    with pytest.raises(InvalidArgument):
        assemble_transient_system(parse_netlist("R1 1 0 5"), 0.0)


def _ramp_response(unit_ramp, dt, t):
    """Exact response to the source the solver sees: 0 one step before t=0, 1 from t=0 on,
    linear in between (the companion models interpolate linearly)."""
    return (unit_ramp(t + dt) - unit_ramp(t)) / dt


def _rc_error(dt, tau=1e-6, T=5e-6):
    R = 1e3
    net = Netlist.from_elements([VoltageSource("V1", 1, 0, dc=1.0), Resistor("R1", 1, 2, R),
                                 Capacitor("C1", 2, 0, tau / R)])
    n = int(round(T / dt))
    r = solve_transient(net, dt, n)
    t = dt * np.arange(n)

    def ramp(s):
        s = np.maximum(s, 0.0)
        return s - tau * (1 - np.exp(-s / tau))

    return np.max(np.abs(r.node_v[2] - _ramp_response(ramp, dt, t)))


def _rlc_error(dt, R=20.0, L=1e-6, C=1e-9, T=2e-6):
    a = R / (2 * L)
    wd = math.sqrt(1 / (L * C) - a * a)
    p = -a + 1j * wd
    net = Netlist.from_elements([VoltageSource("V1", 1, 0, dc=1.0), Resistor("R1", 1, 2, R),
                                 Inductor("L1", 2, 3, L), Capacitor("C1", 3, 0, C)])
    n = int(round(T / dt))
    r = solve_transient(net, dt, n)
    t = dt * np.arange(n)

    def ramp(s):
        # integral of the underdamped step response 1 - e^{-at}(cos wd t + a/wd sin wd t)
        s = np.maximum(s, 0.0)
        return s - np.real((1 - 1j * a / wd) * (np.exp(p * s) - 1) / p)

    return np.max(np.abs(r.node_v[3] - _ramp_response(ramp, dt, t)))


def _slope(refine, errors):
    return -np.polyfit(np.log(refine), np.log(errors), 1)[0]


def test_rc_second_order():
    k = np.array([10, 20, 40, 80])
    errs = [_rc_error(1e-6 / m) for m in k]
    assert errs[0] < 1e-3
    assert 1.8 <= _slope(k, errs) <= 2.2


def test_rlc_second_order():
    period = 2 * math.pi * math.sqrt(1e-6 * 1e-9)
    k = np.array([20, 40, 80, 160])
    errs = [_rlc_error(period / m) for m in k]
    assert errs[-1] < 2e-4
    assert 1.8 <= _slope(k, errs) <= 2.2


def test_inductor_current_recorded():
    net = Netlist.from_elements([VoltageSource("V1", 1, 0, dc=1.0), Resistor("R1", 1, 2, 10.0),
                                 Inductor("L1", 2, 0, 1e-6)])
    r = solve_transient(net, 1e-9, 2000)
    # settles to V/R through the inductor
    assert r.current("L1").samples[-1] == pytest.approx(0.1, rel=1e-6)


def test_passive_energy_balance():
    net = Netlist.from_elements([VoltageSource("V1", 1, 0, spec=SourceSpec(1e9, 0.5e9)),
                                 Resistor("R1", 1, 2, 30.0), Inductor("L1", 2, 3, 5e-9),
                                 Capacitor("C1", 3, 0, 4e-12), Resistor("R2", 3, 0, 100.0)])
    dt = 1e-12
    for n in (4000, 20000):
        r = solve_transient(net, dt, n)
        delivered = -np.sum(r.node_v[1] * r.branch_i["V1"]) * dt
        dissipated = (np.sum((r.node_v[1] - r.node_v[2]) ** 2) / 30.0
                      + np.sum(r.node_v[3] ** 2) / 100.0) * dt
        assert dissipated <= delivered * (1 + 1e-9)
    # after ring-down nothing is left in storage
    assert dissipated == pytest.approx(delivered, rel=1e-9)


# -- diodes ------------------------------------------------------------------------------------

def _rectifier(dt, n, f=1e6):
    net = Netlist.from_elements([
        VoltageSource("V1", 1, 0, waveform=lambda t: 2 * math.sin(2 * math.pi * f * t)),
        Diode("D1", 1, 2), Resistor("R1", 2, 0, 1e3), Capacitor("C1", 2, 0, 2e-9)])
    return net, solve_transient(net, dt, n)


def test_rectifier_matches_refined_reference():
    dt = 1 / (1e6 * 200)
    _, a = _rectifier(dt, 600)
    _, b = _rectifier(dt / 10, 6000)
    va, vb = a.node_v[2], b.node_v[2][::10]
    assert np.max(np.abs(va - vb)) <= 0.01 * np.max(np.abs(vb))
    # output is non-negative and at least a diode drop below the 2 V peak
    assert va.min() >= -1e-9
    assert va.max() < 2.0 - 0.2
    assert a.newton_iteration_counts.max() > 1


def test_newton_limiting_from_arbitrary_guesses(rng):
    net, _ = _rectifier(5e-9, 1)
    cfg = NewtonConfig()
    n = 400
    solver = TransientSolver(assemble_transient_system(net, 5e-9), n, cfg)
    for _ in range(n):
        guess = rng.uniform(-20, 20, solver.st.size)
        sol = solver.solve_step(guess=guess)
        assert sol.iterations[0] <= cfg.max_iters
        solver.accept(sol)


def test_divergence_names_step():
    net, _ = _rectifier(5e-9, 1)
    with pytest.raises(Divergence) as info:
        solve_transient(net, 5e-9, 200, NewtonConfig(max_iters=1))
    assert info.value.step is not None
    assert "step" in str(info.value)


def test_newton_config_validation():
    for kw in (dict(abs_tol=0), dict(max_iters=0), dict(junction_voltage_limit=0)):
        with pytest.raises(InvalidArgument):
            NewtonConfig(**kw)


# -- EM ports ------------------------------------------------------------------------------------

def test_port_needs_model():
    net = parse_netlist("V1 1 0 DC=1\nR1 1 2 50\nP1 2 0 PORT=0")
    with pytest.raises(InvalidArgument):
        solve_transient(net, 1e-12, 10)
    with pytest.raises(InvalidArgument):
        solve_transient(net, 1e-12, 10, port_model=PortResponse.resistive([50.0], 1e-12, 5))


@pytest.mark.parametrize("diode", [False, True])
def test_delta_port_matches_resistor(diode):
    src = "V1 1 0 F0=10e9 FBW=2e9 AMP=2\n"
    mid = "D1 1 2\nR9 1 2 1k\n" if diode else "R9 1 2 50\n"
    dt = 1 / (20 * 12e9)
    with_r = parse_netlist(src + mid + "C1 2 3 1p\nR2 3 0 75")
    with_p = parse_netlist(src + mid + "C1 2 3 1p\nP2 3 0 PORT=0")
    a = solve_transient(with_r, dt, 400)
    b = solve_transient(with_p, dt, 400, port_model=PortResponse.resistive([75.0], dt, 400))
    assert np.max(np.abs(a.node_v - b.node_v)) <= 1e-12
    np.testing.assert_allclose(b.branch_i["P2"], a.node_v[3] / 75.0, atol=1e-14)


def test_batch_matches_single_solves():
    base = parse_netlist("V1 1 0 F0=10e9 FBW=2e9 AMP=3\nD1 1 2\nRA 1 2 1k\nRO 2 0 10")
    nets = [base.replace_element("RA", R=r) for r in (100.0, 1e3, 1e5)]
    dt = 1 / (20 * 12e9)
    batch = solve_transient_batch(nets, dt, 300)
    for net, res in zip(nets, batch):
        single = solve_transient(net, dt, 300)
        np.testing.assert_allclose(res.node_v, single.node_v, rtol=0, atol=1e-12)


def test_batch_drop_keeps_good_members():
    loud = parse_netlist("V1 1 0 F0=10e9 FBW=2e9 AMP=3\nD1 1 2\nRA 1 2 1k\nRO 2 0 10")
    quiet = loud.replace_element("V1", spec=SourceSpec(10e9, 2e9, 1e-3))
    dt, cfg = 1 / (20 * 12e9), NewtonConfig(max_iters=3)
    with pytest.raises(Divergence):
        solve_transient_batch([loud, quiet], dt, 300, cfg)
    out = solve_transient_batch([loud, quiet], dt, 300, cfg, on_divergence="drop")
    assert out[0] is None
    ref = solve_transient(quiet, dt, 300, cfg)
    np.testing.assert_allclose(out[1].node_v, ref.node_v, rtol=0, atol=1e-15)
    with pytest.raises(InvalidArgument):
        solve_transient_batch([quiet], dt, 10, on_divergence="ignore")


def test_batch_rejects_mixed_topology():
    a = parse_netlist("V1 1 0 DC=1\nR1 1 0 5")
    b = parse_netlist("V1 1 0 DC=1\nC1 1 0 5p")
    with pytest.raises(InvalidArgument):
        solve_transient_batch([a, b], 1e-12, 5)


def test_result_accessors():
    net = parse_netlist("V1 1 0 DC=1\nR1 1 2 1\nR2 2 0 1")
    r = solve_transient(net, 1e-9, 4)
    assert r.n_steps == 4
    assert len(r.node_voltages) == 3
    assert set(r.branch_currents) == {"V1"}
    np.testing.assert_allclose(r.element_voltage("R1").samples, 0.5)
    assert all(s.dt == 1e-9 and len(s) == 4 for s in r.node_voltages)
