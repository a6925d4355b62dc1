import math

import numpy as np
import pytest

from portforge.circuit import NewtonConfig, parse_netlist, solve_transient
from portforge.emport import (EXTRACTION_CALLS, BETA, GAMMA, Mode, NewmarkIntegrator,
                              NewmarkState, PortResponse, SecondOrderLTI, band_max_abs,
                              convolve_currents, extract_port_column, extract_port_response,
                              grid_surrogate, load_port_response, modal_surrogate, newmark_step,
                              port_convolution, port_convolution_split, reflection_coefficient,
                              save_port_response, solve_self_consistent)
from portforge.errors import InvalidArgument
from portforge.signals import TimeSignal, default_timestep, relative_l2_difference

DT = default_timestep(10e9, 2e9)


def oscillator(w):
    return SecondOrderLTI([[1.0]], [[0.0]], [[w * w]], [[1.0]])


def march_free(sys, x0, dt, n):
    w2 = sys.K[0, 0]
    s = NewmarkState(np.array([x0]), np.zeros(1), np.array([-w2 * x0]))
    integ = NewmarkIntegrator(sys, dt)
    xs = np.empty(n + 1)
    vs = np.empty(n + 1)
    xs[0], vs[0] = x0, 0.0
    for k in range(n):
        s = integ.step(s, np.zeros(1))
        xs[k + 1], vs[k + 1] = s.x[0], s.xdot[0]
    return xs, vs


# -- Newmark ------------------------------------------------------------------------------------

def test_coefficients_are_average_acceleration():
    assert (GAMMA, BETA) == (0.5, 0.25)


def test_energy_conserved_over_ten_thousand_steps():
    w = 2 * math.pi * 1e9
    xs, vs = march_free(oscillator(w), 1.0, 1e-11, 10_000)
    energy = 0.5 * vs ** 2 + 0.5 * w * w * xs ** 2
    assert np.max(np.abs(energy - energy[0])) / energy[0] <= 1e-10


def test_second_order_convergence_against_cosine():
    w = 2 * math.pi
    T = 2.0
    k = np.array([20, 40, 80, 160])
    errs = []
    for m in k:
        dt = 1.0 / m
        xs, _ = march_free(oscillator(w), 1.0, dt, int(round(T / dt)))
        t = dt * np.arange(xs.size)
        errs.append(np.max(np.abs(xs - np.cos(w * t))))
    slope = -np.polyfit(np.log(k), np.log(errs), 1)[0]
    assert 1.8 <= slope <= 2.2


def test_newmark_step_matches_hand_update():
    sys = SecondOrderLTI([[2.0]], [[0.3]], [[5.0]], [[1.0]])
    s = NewmarkState(np.array([0.2]), np.array([-0.1]), np.array([0.4]))
    dt, f = 0.05, 1.5
    a = (f - 0.3 * (-0.1 + 0.5 * dt * 0.4) - 5.0 * (0.2 - 0.1 * dt + 0.25 * dt * dt * 0.4)) \
        / (2.0 + 0.5 * dt * 0.3 + 0.25 * dt * dt * 5.0)
    out = newmark_step(sys, s, [f], dt)
    assert out.xddot[0] == pytest.approx(a, rel=1e-14)
    assert out.xdot[0] == pytest.approx(-0.1 + 0.5 * dt * (0.4 + a), rel=1e-14)
    assert out.x[0] == pytest.approx(0.2 - 0.1 * dt + 0.25 * dt * dt * (0.4 + a), rel=1e-14)
    assert out.step_index == 1


def test_rest_stays_at_rest(small_surrogate):
    s = NewmarkState.rest(small_surrogate.dof)
    integ = NewmarkIntegrator(small_surrogate, DT)
    for _ in range(50):
        s = integ.step(s, np.zeros(small_surrogate.dof))
    assert not np.any(s.x) and not np.any(s.xdot) and not np.any(s.xddot)


def test_system_validation():
    with pytest.raises(InvalidArgument):
        SecondOrderLTI([[0.0]], [[0.0]], [[1.0]], [[1.0]])
    with pytest.raises(InvalidArgument):
        SecondOrderLTI(np.eye(2), [[0, 1], [0, 0]], np.eye(2), np.ones(2))
    with pytest.raises(InvalidArgument):
        SecondOrderLTI(np.eye(2), -np.eye(2), np.eye(2), np.ones(2))
    with pytest.raises(InvalidArgument):
        SecondOrderLTI(np.eye(2), np.eye(3), np.eye(2), np.ones(2))
    with pytest.raises(InvalidArgument):
        NewmarkIntegrator(oscillator(1.0), 0.0)
    with pytest.raises(InvalidArgument):
        NewmarkIntegrator(oscillator(1.0), 1.0, solver="qr")


def test_cg_matches_direct(small_surrogate):
    a = extract_port_response(small_surrogate, DT, 200, "direct")
    b = extract_port_response(small_surrogate, DT, 200, "cg")
    assert np.max(np.abs(a.g - b.g)) <= 1e-9 * np.max(np.abs(a.g))


# -- extraction -----------------------------------------------------------------------------------

def test_zero_coupling_gives_zero_response():
    sys = SecondOrderLTI(np.eye(3), np.eye(3), np.eye(3), np.zeros((3, 2)))
    assert not np.any(extract_port_response(sys, 0.1, 20).g)


def _modal_oracle(sys, dt, n):
    """Diagonal surrogate: per-mode amplification-matrix powers via eigen-decomposition."""
    P = sys.n_ports
    g = np.zeros((P, P, n))
    for k in range(sys.dof):
        m, c, kk = sys.M[k, k], sys.D[k, k], sys.K[k, k]
        s = m + GAMMA * dt * c + BETA * dt * dt * kk
        # state (x, v, a): x' = x + dt v + dt^2/4 (a + a'), v' = v + dt/2 (a + a')
        # a' = (f' - c (v + dt/2 a) - k (x + dt v + dt^2/4 a)) / s
        row_a = -np.array([kk, c + kk * dt, c * dt / 2 + kk * dt * dt / 4]) / s
        T = np.array([[1.0, dt, dt * dt / 4], [0.0, 1.0, dt / 2], [0, 0, 0]])
        T[2] = row_a
        T[0] += dt * dt / 4 * row_a
        T[1] += dt / 2 * row_a
        e = np.array([dt * dt / 4, dt / 2, 1.0]) / s
        lam, V = np.linalg.eig(T)
        coef = np.linalg.solve(V, e)
        powers = lam[None, :] ** np.arange(n)[:, None]
        h = np.real((powers * coef[None, :]) @ V[1])
        b = sys.B[k]
        g += np.einsum("i,j,n->ijn", b, b, h)
    return g


def test_modal_response_matches_closed_form():
    sys = modal_surrogate([Mode(9e9, 0.07, 50.0, 0), Mode(12e9, 0.05, 70.0, 1)], 2,
                          [[0, 0.3], [0.2, 0]])
    resp = extract_port_response(sys, DT, 400)
    ref = _modal_oracle(sys, DT, 400)
    assert np.max(np.abs(resp.g - ref)) <= 1e-8 * np.max(np.abs(ref))


def test_reciprocity_for_symmetric_system(rng):
    n = 6
    A = rng.standard_normal((n, n))
    M = A @ A.T + n * np.eye(n)
    C = rng.standard_normal((n, n))
    K = C @ C.T
    D = 0.1 * np.eye(n) + 0.01 * K
    sys = SecondOrderLTI(M, D, K, rng.standard_normal((n, 2)))
    resp = extract_port_response(sys, 0.05, 300)
    assert resp.reciprocity_error() <= 1e-8
    assert np.max(np.abs(resp.g[0, 1] - resp.g[1, 0])) <= 1e-8 * np.max(np.abs(resp.g))


def test_instantaneous_term_matches_first_sample(small_surrogate):
    integ = NewmarkIntegrator(small_surrogate, DT)
    resp = extract_port_response(small_surrogate, DT, 5)
    np.testing.assert_allclose(integ.instantaneous_impedance(), resp.g[:, :, 0], rtol=1e-14)


def test_extraction_counts_one_run_per_port():
    sys = modal_surrogate([Mode(9e9, 0.1, 50.0, p) for p in range(3)], 3)
    EXTRACTION_CALLS.reset()
    extract_port_response(sys, DT, 10)
    assert EXTRACTION_CALLS.count == 3
    extract_port_column(sys, 1, DT, 10)
    assert EXTRACTION_CALLS.count == 4


def test_modal_surrogate_resistance_at_resonance():
    f, R = 10e9, 60.0
    sys = modal_surrogate([Mode(f, 0.05, R)])
    w = 2 * math.pi * f
    Z = (1j * w * sys.B.T @ np.linalg.solve(-w * w * sys.M + 1j * w * sys.D + sys.K, sys.B))[0, 0]
    assert Z == pytest.approx(R, rel=1e-12)


def test_grid_surrogate_fundamental_and_resistance():
    f1, R = 1e9, 50.0
    sys = grid_surrogate(12, 10, f1, 0.2, R, [(5, 4), (2, 7)])
    assert sys.is_sparse and sys.dof == 120 and sys.n_ports == 2
    K = sys.K.toarray()
    lam, vec = np.linalg.eigh(K)
    assert math.sqrt(lam[0]) == pytest.approx(2 * math.pi * f1, rel=1e-12)
    # lowest mode's contribution at port 0 at resonance: (b.phi)^2 / (2 zeta w1)
    bphi = sys.B[:, 0] @ vec[:, 0]
    assert bphi ** 2 / (2 * 0.2 * 2 * math.pi * f1) == pytest.approx(R, rel=1e-10)
    with pytest.raises(InvalidArgument):
        grid_surrogate(4, 4, f1, 0.2, R, [(9, 0)])


def test_port_response_io(tmp_path, small_surrogate):
    resp = extract_port_response(small_surrogate, DT, 64)
    back = load_port_response(save_port_response(resp, tmp_path / "g.csv"))
    np.testing.assert_array_equal(back.g, resp.g)
    assert back.dt == resp.dt and back.basis == resp.basis
    bad = tmp_path / "bad.csv"
    bad.write_text("not a header\n")
    with pytest.raises(InvalidArgument):
        load_port_response(bad)
    short = tmp_path / "short.csv"
    short.write_text(f"# portresponse n_ports=1 dt={DT!r} n_samples=3 basis=NewmarkConsistent\n0,0,1,2\n")
    with pytest.raises(InvalidArgument):
        load_port_response(short)


def test_port_response_validation():
    with pytest.raises(InvalidArgument):
        PortResponse(np.zeros((2, 3, 4)), 1.0)
    with pytest.raises(InvalidArgument):
        PortResponse([1.0, np.nan], 1.0)
    with pytest.raises(InvalidArgument):
        PortResponse([1.0], 1.0, basis="Other")


# -- convolution --------------------------------------------------------------------------------------

def test_delta_response_is_a_resistor(rng):
    resp = PortResponse.resistive([50.0], 1e-12, 40)
    j = TimeSignal(rng.standard_normal(40), 1e-12)
    for n in (0, 7, 39):
        assert port_convolution(resp, [j], n)[0] == pytest.approx(50 * j.samples[n], rel=1e-15)


def test_step_current_gives_cumulative_sum(rng):
    g = rng.standard_normal(30)
    resp = PortResponse(g, 1.0)
    step = TimeSignal(np.ones(30), 1.0)
    for n in range(30):
        assert port_convolution(resp, [step], n)[0] == pytest.approx(g[: n + 1].sum(), abs=1e-12)


def test_convolution_matches_direct_sum(rng):
    P, N = 2, 32
    g = rng.standard_normal((P, P, N))
    J = rng.standard_normal((P, N))
    resp = PortResponse(g, 1e-12)
    cur = [TimeSignal(J[p], 1e-12) for p in range(P)]
    n = N - 1
    want = np.array([sum(g[i, j, n - k] * J[j, k] for j in range(P) for k in range(n + 1))
                     for i in range(P)])
    got = port_convolution(resp, cur, n)
    assert np.max(np.abs(got - want)) <= 1e-13 * np.max(np.abs(want))
    g0, hist = port_convolution_split(resp, cur, n)
    np.testing.assert_allclose(g0 @ J[:, n] + hist, got, rtol=1e-14)
    full = convolve_currents(resp, cur)
    np.testing.assert_allclose([s.samples[n] for s in full], got, rtol=1e-13)


def test_convolution_grid_checks():
    resp = PortResponse(np.ones(8), 1.0)
    with pytest.raises(InvalidArgument):
        port_convolution(resp, [TimeSignal(np.ones(8), 2.0)], 3)
    with pytest.raises(InvalidArgument):
        port_convolution(resp, [TimeSignal(np.ones(8), 1.0)] * 2, 3)
    with pytest.raises(InvalidArgument):
        port_convolution(resp, [TimeSignal(np.ones(8), 1.0)], 8)


# -- self-consistent solve ----------------------------------------------------------------------------

FEED = "V1 1 0 F0=10e9 FBW=2e9 AMP=1\nR1 1 2 50\nP1 2 0 PORT=0\n"
DIODE_FEED = "V1 1 0 F0=10e9 FBW=2e9 AMP=3\nD1 1 2 T=300\nRA 1 2 1k\nRO 2 3 10\nP1 3 0 PORT=0\n"


def _both(sys, text, n=600):
    net = parse_netlist(text)
    resp = extract_port_response(sys, DT, n)
    pe = solve_transient(net, DT, n, NewtonConfig(), resp)
    sc = solve_self_consistent(sys, net, DT, n, NewtonConfig())
    return net, pe, sc


def test_linear_feed_equivalence(small_surrogate):
    _, pe, sc = _both(small_surrogate, FEED)
    err = relative_l2_difference(pe.element_voltage("P1"), sc.element_voltage("P1"))
    assert err <= 1e-12
    np.testing.assert_allclose(sc.em_port_voltages[0], sc.element_voltage("P1").samples,
                               rtol=0, atol=1e-12 * np.max(np.abs(sc.em_port_voltages)))


def test_diode_feed_equivalence(small_surrogate):
    _, pe, sc = _both(small_surrogate, DIODE_FEED)
    assert pe.newton_iteration_counts.max() > 2
    assert relative_l2_difference(pe.element_voltage("P1"), sc.element_voltage("P1")) <= 1e-9


def test_uncoupled_surrogate_shorts_the_port():
    sys = SecondOrderLTI(np.eye(2), np.eye(2), np.eye(2), np.zeros((2, 1)))
    net, pe, sc = _both(sys, FEED, 200)
    assert not np.any(sc.element_voltage("P1").samples)
    np.testing.assert_array_equal(pe.node_v, sc.node_v)
    np.testing.assert_allclose(sc.current("P1").samples * 50.0, sc.node_v[1], atol=1e-15)


def test_self_consistent_checks_port_ids(small_surrogate):
    net = parse_netlist("V1 1 0 DC=1\nR1 1 2 50\nP1 2 0 PORT=3")
    with pytest.raises(InvalidArgument):
        solve_self_consistent(small_surrogate, net, DT, 5)


# -- reflection coefficient ---------------------------------------------------------------------------

def _wave(n=256, dt=DT):
    from portforge.signals import SourceSpec, sample_source
    return sample_source(SourceSpec(10e9, 2e9), dt, n)


def test_matched_and_open_loads():
    v = _wave()
    i = TimeSignal(v.samples / 50.0, v.dt)
    g = reflection_coefficient(v, i, 50.0, 10e9, 2e9)
    assert np.nanmax(np.abs(g.bins)) <= 1e-12
    g = reflection_coefficient(v, TimeSignal(np.zeros(len(v)), v.dt), 50.0, 10e9, 2e9)
    np.testing.assert_allclose(g.bins, 1.0, rtol=1e-12)
    assert np.all(np.abs(g.freqs - 10e9) <= 2e9)


def test_resistive_load_three_times_z0():
    net = parse_netlist("V1 1 0 F0=10e9 FBW=2e9 AMP=1\nR1 1 2 50\nR2 2 0 150")
    r = solve_transient(net, DT, 512)
    v = r.voltage(2)
    i = TimeSignal(r.node_v[2] / 150.0, DT)
    g = reflection_coefficient(v, i, 50.0, 10e9, 2e9)
    np.testing.assert_allclose(np.abs(g.bins), 0.5, rtol=1e-10)
    assert band_max_abs(g) == pytest.approx(0.5, rel=1e-10)


def test_reflection_invalid_bins_and_errors():
    v = _wave(64)
    with pytest.raises(InvalidArgument):
        reflection_coefficient(v, v, 0.0)
    with pytest.raises(InvalidArgument):
        reflection_coefficient(v, _wave(65), 50.0)
    with pytest.raises(InvalidArgument):
        reflection_coefficient(v, v, 50.0, 1e15, 1.0)
    zero = TimeSignal(np.zeros(64), v.dt)
    g = reflection_coefficient(zero, zero, 50.0)
    assert np.all(np.isnan(g.bins))
    with pytest.raises(InvalidArgument):
        band_max_abs(g)
