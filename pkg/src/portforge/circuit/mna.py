"""Modified nodal analysis transient solver.

Unknowns are the non-ground node voltages followed by the branch currents of
voltage sources and EM ports. Dynamic elements use trapezoidal companion
models (average-acceleration Newmark reduced to first order):

* capacitor: conductance ``2C/dt`` with history ``2C/dt * v_n + i_n``
* inductor: conductance ``dt/(2L)`` with history ``i_n + dt/(2L) * v_n``
* EM port: branch equation ``v_p - sum_q g0[p, q] i_q = h_p`` where ``g0`` is
  the instantaneous term of the port response and ``h`` the history voltage
* diode: Newton linearisation ``i = g_d v + (i_d - g_d v_lin)``

Every circuit is taken to be at rest one step before the first sample, so the
first sample is itself a regular step. This matches the causal convention of
the port-response extraction and keeps the coupled map exactly time-invariant.

A solver instance can hold a batch of netlists that share one topology and
differ only in element values; all members march in lock-step and Newton
iterations are masked per member.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from ..errors import Divergence, InvalidArgument, SingularSystem, StructuralSingularity
from ..signals import TimeSignal, sample_source
from .devices import EXP_CLAMP, shockley, thermal_voltage
from .netlist import Capacitor, Diode, EMPort, Inductor, Netlist, Resistor, VoltageSource

_EPS = np.finfo(float).eps
_STALL_FACTOR = 1e3


@dataclass(frozen=True)
class NewtonConfig:
    abs_tol: float = 1e-12
    max_iters: int = 100
    junction_voltage_limit: float = 0.8

    def __post_init__(self):
        if not self.abs_tol > 0:
            raise InvalidArgument("abs_tol must be positive")
        if self.max_iters < 1:
            raise InvalidArgument("max_iters must be >= 1")
        if not self.junction_voltage_limit > 0:
            raise InvalidArgument("junction_voltage_limit must be positive")


def _incidence(n_nodes, elements):
    """(n_nodes-1, k) matrix with +1 at n_plus and -1 at n_minus, ground row dropped."""
    E = np.zeros((n_nodes - 1, len(elements)))
    for k, el in enumerate(elements):
        if el.n_plus:
            E[el.n_plus - 1, k] += 1.0
        if el.n_minus:
            E[el.n_minus - 1, k] -= 1.0
    return E


def _check_connectivity(net: Netlist):
    parent = list(range(net.node_count))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for el in net.elements:
        parent[find(el.n_plus)] = find(el.n_minus)
    floating = [k for k in range(1, net.node_count) if find(k) != find(0)]
    if floating:
        raise StructuralSingularity(f"nodes {floating} have no path to ground")


@dataclass
class StepSolution:
    """Converged solution of one timestep, not yet committed to solver history."""

    x: np.ndarray
    vd: np.ndarray
    iterations: np.ndarray
    failed: np.ndarray | None = None


class SystemStencil:
    """Assembled MNA structure for a batch of same-topology netlists at fixed ``dt``.

    ``port_g0`` is the (n_model_ports, n_model_ports) instantaneous port
    impedance; it is required when the netlists contain EM ports.
    """

    def __init__(self, nets, dt: float, port_g0=None):
        nets = list(nets)
        if not nets:
            raise InvalidArgument("empty netlist batch")
        if not dt > 0:
            raise InvalidArgument(f"dt must be positive, got {dt}")
        first = nets[0]
        key = first.topology()
        for other in nets[1:]:
            if other.topology() != key:
                raise InvalidArgument("batched netlists must share one topology")
        _check_connectivity(first)
        self.nets = nets
        self.batch = len(nets)
        self.dt = dt
        self.n_nodes = first.node_count

        self.resistors = first.of_kind(Resistor)
        self.capacitors = first.of_kind(Capacitor)
        self.inductors = first.of_kind(Inductor)
        self.sources = first.of_kind(VoltageSource)
        self.diodes = first.of_kind(Diode)
        self.ports = first.of_kind(EMPort)
        self.port_ids = np.array([p.port_id for p in self.ports], dtype=int)

        nv = self.n_nodes - 1
        self.nv = nv
        self.n_src = len(self.sources)
        self.n_port = len(self.ports)
        self.size = nv + self.n_src + self.n_port
        self.src_rows = np.arange(nv, nv + self.n_src)
        self.port_rows = np.arange(nv + self.n_src, self.size)

        self.E_R = _incidence(self.n_nodes, self.resistors)
        self.E_C = _incidence(self.n_nodes, self.capacitors)
        self.E_L = _incidence(self.n_nodes, self.inductors)
        self.E_D = _incidence(self.n_nodes, self.diodes)
        self.E_S = _incidence(self.n_nodes, self.sources)
        self.E_P = _incidence(self.n_nodes, self.ports)

        def values(kind, attr):
            return np.array([[getattr(e, attr) for e in net.of_kind(kind)] for net in nets],
                            dtype=float).reshape(self.batch, -1)

        self.G_C = 2.0 * values(Capacitor, "C") / dt
        self.G_L = dt / (2.0 * values(Inductor, "L"))
        self.G_R = 1.0 / values(Resistor, "R")
        self.d_Is = values(Diode, "Is")
        self.d_n = values(Diode, "n")
        self.d_T = values(Diode, "T")
        self.d_nvt = self.d_n * thermal_voltage(self.d_T) if self.diodes else np.zeros((self.batch, 0))

        if self.n_port:
            if port_g0 is None:
                raise InvalidArgument("netlist has EM ports but no port model was supplied")
            port_g0 = np.asarray(port_g0, dtype=float)
            if self.port_ids.max() >= port_g0.shape[0]:
                raise InvalidArgument(
                    f"port id {self.port_ids.max()} outside port model with {port_g0.shape[0]} ports")
            self.g0 = port_g0[np.ix_(self.port_ids, self.port_ids)]
        else:
            self.g0 = np.zeros((0, 0))

        self.A_lin = self._linear_matrix()
        self._check_rank()

    def _conductance(self, E, G):
        # E diag(g) E^T for each batch member
        return np.einsum("ik,bk,jk->bij", E, G, E)

    def _linear_matrix(self):
        B, nv = self.batch, self.nv
        A = np.zeros((B, self.size, self.size))
        A[:, :nv, :nv] += self._conductance(self.E_R, self.G_R)
        A[:, :nv, :nv] += self._conductance(self.E_C, self.G_C)
        A[:, :nv, :nv] += self._conductance(self.E_L, self.G_L)
        for E, rows in ((self.E_S, self.src_rows), (self.E_P, self.port_rows)):
            if rows.size:
                A[:, :nv, rows] += E
                A[:, rows, :nv] += E.T
        if self.n_port:
            A[:, self.port_rows[:, None], self.port_rows[None, :]] -= self.g0
        return A

    def _check_rank(self):
        A = self.A_lin
        if self.diodes:
            _, g = shockley(np.zeros_like(self.d_Is), self.d_Is, self.d_n, self.d_T)
            A = A.copy()
            A[:, :self.nv, :self.nv] += self._conductance(self.E_D, g)
        ranks = np.linalg.matrix_rank(A)
        if np.any(ranks < self.size):
            raise StructuralSingularity(
                "MNA matrix is structurally singular (voltage-source loop or floating subcircuit)")


def assemble_transient_system(net: Netlist, dt: float, port_g0=None) -> SystemStencil:
    return SystemStencil([net], dt, port_g0)


class TransientSolver:
    """Stateful stepper over a :class:`SystemStencil`.

    ``solve_step`` computes a trial solution for the next step without touching
    the stored history; ``accept`` commits it. The self-consistent coupling
    uses the split to iterate a timestep against the EM system.
    """

    def __init__(self, stencil: SystemStencil, n_steps: int, cfg: NewtonConfig | None = None):
        self.st = stencil
        self.cfg = cfg or NewtonConfig()
        self.n_steps = n_steps
        st = stencil
        B = st.batch
        self.step_index = 0
        self.x = np.zeros((B, st.size))
        self.i_C = np.zeros((B, len(st.capacitors)))
        self.i_L = np.zeros((B, len(st.inductors)))
        self.vd = np.zeros((B, len(st.diodes)))
        self.src_values = self._sample_sources(n_steps)
        self._lu = None
        self._inv = None
        if not st.diodes:
            try:
                if B == 1:
                    self._lu = scipy.linalg.lu_factor(st.A_lin[0], check_finite=True)
                else:
                    # one factorisation per member for the whole run
                    self._inv = np.linalg.inv(st.A_lin)
            except (ValueError, np.linalg.LinAlgError) as exc:
                raise SingularSystem(str(exc)) from None

    def _sample_sources(self, n_steps):
        st = self.st
        out = np.zeros((st.batch, st.n_src, n_steps))
        t = st.dt * np.arange(n_steps)
        for b, net in enumerate(st.nets):
            for k, src in enumerate(net.of_kind(VoltageSource)):
                row = np.full(n_steps, src.dc)
                if src.spec is not None:
                    row += sample_source(src.spec, st.dt, n_steps).samples
                if src.waveform is not None:
                    row += np.array([src.waveform(tk) for tk in t], dtype=float)
                out[b, k] = row
        return out

    def _history_rhs(self, n, port_history):
        st = self.st
        nv = st.nv
        rhs = np.zeros((st.batch, st.size))
        x_nodes = self.x[:, :nv]
        if st.capacitors:
            ih = st.G_C * (x_nodes @ st.E_C) + self.i_C
            rhs[:, :nv] += ih @ st.E_C.T
        if st.inductors:
            ih = self.i_L + st.G_L * (x_nodes @ st.E_L)
            rhs[:, :nv] -= ih @ st.E_L.T
        if st.n_src:
            rhs[:, st.src_rows] = self.src_values[:, :, n]
        if st.n_port:
            if port_history is None:
                raise InvalidArgument("port history required for netlists with EM ports")
            rhs[:, st.port_rows] = np.asarray(port_history, dtype=float).reshape(st.batch, st.n_port)
        return rhs

    def solve_step(self, port_history=None, guess=None, allow_fail: bool = False) -> StepSolution:
        """Trial solution of the next step. With ``allow_fail`` members whose Newton
        loop does not converge are flagged in ``failed`` instead of raising."""
        st, cfg = self.st, self.cfg
        n = self.step_index
        if n >= self.n_steps:
            raise InvalidArgument("solver already advanced n_steps steps")
        rhs = self._history_rhs(n, port_history)
        B = st.batch

        if not st.diodes:
            try:
                if self._lu is not None:
                    x = scipy.linalg.lu_solve(self._lu, rhs[0])[None, :]
                else:
                    x = (self._inv @ rhs[..., None])[..., 0]
            except np.linalg.LinAlgError as exc:
                raise SingularSystem(f"step {n}: {exc}") from None
            return StepSolution(x, self.vd.copy(), np.ones(B, dtype=int))

        x_prev = self.x.copy() if guess is None else np.array(guess, dtype=float).reshape(B, st.size)
        vd_lin = x_prev[:, :st.nv] @ st.E_D if guess is not None else self.vd.copy()
        x_out = x_prev.copy()
        vd_out = vd_lin.copy()
        iters = np.zeros(B, dtype=int)
        active = np.arange(B)
        lim = cfg.junction_voltage_limit
        E_D = st.E_D
        nv = st.nv
        tol, tol_rel = cfg.abs_tol, 16 * _EPS
        err_prev = np.full(B, np.inf)

        for it in range(1, cfg.max_iters + 1):
            full = active.size == B
            sel = slice(None) if full else active
            vl = vd_lin[sel]
            Is, nvt = st.d_Is[sel], st.d_nvt[sel]
            # Shockley with tangent continuation past EXP_CLAMP (see devices.shockley)
            arg = vl / nvt
            argc = np.minimum(arg, EXP_CLAMP)
            e = np.exp(argc)
            i_d = Is * (e * (1.0 + (arg - argc)) - 1.0)
            g_d = Is * e / nvt
            A = st.A_lin[sel].copy() if not full else st.A_lin.copy()
            A[:, :nv, :nv] += (E_D * g_d[:, None, :]) @ E_D.T
            r = rhs[sel].copy() if not full else rhs.copy()
            r[:, :nv] -= (i_d - g_d * vl) @ E_D.T
            try:
                x = np.linalg.solve(A, r[..., None])[..., 0]
            except np.linalg.LinAlgError as exc:
                raise SingularSystem(f"step {n}: {exc}") from None
            xv = x[:, :nv]
            vd_raw = xv @ E_D
            dv = vd_raw - vl
            err = np.maximum(
                (np.abs(xv - x_prev[sel, :nv]) / (tol + tol_rel * np.abs(xv))).max(axis=1, initial=0.0),
                (np.abs(dv) / (tol + tol_rel * np.abs(vd_raw))).max(axis=1, initial=0.0))
            # an update that stops shrinking just above tol is the roundoff floor of
            # an ill-conditioned solve, not a failure to converge
            stalled = (it >= 3) & (err <= _STALL_FACTOR) & (err >= 0.5 * err_prev[sel])
            done = (err <= 1.0) | stalled
            err_prev[sel] = err
            x_prev[sel] = x
            vd_lin[sel] = vl + np.clip(dv, -lim, lim)
            iters[sel] = it
            if done.all():
                x_out[sel] = x
                vd_out[sel] = vd_raw
                return StepSolution(x_out, vd_out, iters)
            fin = active[done]
            x_out[fin] = x[done]
            vd_out[fin] = vd_raw[done]
            active = active[~done]
        if allow_fail:
            failed = np.zeros(B, dtype=bool)
            failed[active] = True
            x_out[active] = x_prev[active]
            return StepSolution(x_out, vd_out, iters, failed)
        raise Divergence(
            f"Newton failed to converge at step {n} after {cfg.max_iters} iterations "
            f"({active.size} of {B} batch members)", step=n)

    def accept(self, sol: StepSolution):
        st = self.st
        nv = st.nv
        x_old = self.x[:, :nv]
        x_new = sol.x[:, :nv]
        if st.capacitors:
            ih = st.G_C * (x_old @ st.E_C) + self.i_C
            self.i_C = st.G_C * (x_new @ st.E_C) - ih
        if st.inductors:
            ih = self.i_L + st.G_L * (x_old @ st.E_L)
            self.i_L = st.G_L * (x_new @ st.E_L) + ih
        self.x = sol.x.copy()
        self.vd = sol.vd.copy()
        self.step_index += 1

    def port_currents(self, sol: StepSolution) -> np.ndarray:
        return sol.x[:, self.st.port_rows]


@dataclass
class TransientResult:
    """Waveforms of one transient solve. All arrays share ``dt`` and length."""

    dt: float
    node_v: np.ndarray  # (node_count, n_steps), row 0 is ground
    branch_i: dict  # element name -> (n_steps,) array
    newton_iteration_counts: np.ndarray
    netlist: Netlist = field(repr=False, default=None)

    @property
    def n_steps(self) -> int:
        return self.node_v.shape[1]

    @property
    def node_voltages(self) -> list:
        return [TimeSignal(row, self.dt) for row in self.node_v]

    @property
    def branch_currents(self) -> dict:
        return {k: TimeSignal(v, self.dt) for k, v in self.branch_i.items()}

    def voltage(self, node: int) -> TimeSignal:
        return TimeSignal(self.node_v[node], self.dt)

    def element_voltage(self, name: str) -> TimeSignal:
        el = self.netlist.element(name)
        return TimeSignal(self.node_v[el.n_plus] - self.node_v[el.n_minus], self.dt)

    def current(self, name: str) -> TimeSignal:
        return TimeSignal(self.branch_i[name], self.dt)


class _Recorder:
    def __init__(self, stencil: SystemStencil, n_steps: int):
        st = stencil
        self.st = st
        self.x = np.zeros((st.batch, st.size, n_steps))
        self.i_L = np.zeros((st.batch, len(st.inductors), n_steps))
        self.iters = np.zeros((st.batch, n_steps), dtype=int)

    def record(self, n, sol: StepSolution, solver: TransientSolver):
        self.x[:, :, n] = sol.x
        self.iters[:, n] = sol.iterations
        if self.st.inductors:
            self.i_L[:, :, n] = solver.i_L

    def results(self, dt) -> list:
        st = self.st
        out = []
        for b, net in enumerate(st.nets):
            node_v = np.zeros((st.n_nodes, self.x.shape[2]))
            node_v[1:] = self.x[b, :st.nv]
            branch = {}
            for k, src in enumerate(st.sources):
                branch[src.name] = self.x[b, st.src_rows[k]].copy()
            for k, ind in enumerate(st.inductors):
                branch[ind.name] = self.i_L[b, k].copy()
            for k, port in enumerate(st.ports):
                branch[port.name] = self.x[b, st.port_rows[k]].copy()
            out.append(TransientResult(dt, node_v, branch, self.iters[b].copy(), net))
        return out


def _port_history_fn(port_model, port_ids, n_steps):
    """Closure computing the convolution history for all batch members at step n."""
    g = port_model.g[np.ix_(port_ids, port_ids)]
    L = g.shape[2]
    g_flip = np.ascontiguousarray(g[:, :, ::-1])

    def history(n, currents):
        if n == 0:
            return np.zeros(currents.shape[:2])
        # g[n-k] for k = 0..n-1
        return np.einsum("pqk,bqk->bp", g_flip[:, :, L - 1 - n:L - 1], currents[:, :, :n])

    return history


def solve_transient_batch(nets, dt: float, n_steps: int, cfg: NewtonConfig | None = None,
                          port_model=None, on_divergence: str = "raise") -> list:
    """Port-extracted transient solve of several same-topology netlists at once.

    With ``on_divergence="drop"`` a member whose Newton iteration fails gets
    ``None`` in the returned list and the rest of the batch carries on.
    """
    if n_steps < 1:
        raise InvalidArgument("n_steps must be >= 1")
    if on_divergence not in ("raise", "drop"):
        raise InvalidArgument(f"on_divergence must be 'raise' or 'drop', got {on_divergence!r}")
    nets = list(nets)
    has_ports = bool(nets and nets[0].ports)
    g0 = None
    if has_ports:
        if port_model is None:
            raise InvalidArgument("netlist has EM ports but no port model was supplied")
        if abs(port_model.dt - dt) > 1e-12 * dt:
            raise InvalidArgument(f"port model dt {port_model.dt} != solver dt {dt}")
        if port_model.n_samples < n_steps:
            raise InvalidArgument(
                f"port model covers {port_model.n_samples} samples, {n_steps} steps requested")
        g0 = port_model.g[:, :, 0]
    stencil = SystemStencil(nets, dt, g0)
    solver = TransientSolver(stencil, n_steps, cfg)
    rec = _Recorder(stencil, n_steps)
    currents = np.zeros((stencil.batch, stencil.n_port, n_steps))
    history = _port_history_fn(port_model, stencil.port_ids, n_steps) if has_ports else None
    dropped = np.zeros(stencil.batch, dtype=bool)
    allow = on_divergence == "drop"
    for n in range(n_steps):
        h = history(n, currents) if has_ports else None
        sol = solver.solve_step(h, allow_fail=allow)
        if sol.failed is not None:
            dropped |= sol.failed
            if dropped.all():
                return [None] * stencil.batch
            # freeze failed members at rest so they cannot poison later steps
            sol.x[dropped] = 0.0
            sol.vd[dropped] = 0.0
        if has_ports:
            currents[:, :, n] = solver.port_currents(sol)
        solver.accept(sol)
        rec.record(n, sol, solver)
    out = rec.results(dt)
    return [None if d else r for d, r in zip(dropped, out)]


def solve_transient(net: Netlist, dt: float, n_steps: int, cfg: NewtonConfig | None = None,
                    port_model=None) -> TransientResult:
    return solve_transient_batch([net], dt, n_steps, cfg, port_model)[0]
