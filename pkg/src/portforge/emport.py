"""Linear second-order surrogate of the EM system, its port responses, and coupling.

The surrogate obeys ``M x'' + D x' + K x = B i(t)`` where ``i`` holds the
port currents, and the port voltages are ``v = B^T x'``. Its port impedance
``Z(s) = s B^T (s^2 M + s D + K)^-1 B`` is positive real whenever M is SPD and
D, K are PSD, so the surrogate is passive.

Time stepping is the average-acceleration Newmark scheme (gamma=1/2,
beta=1/4). The system is at rest one step before the first sample. A port
response column is the port voltage sequence produced by a unit current on
one port for exactly one sample (a single hat basis function of the
piecewise-linear current interpolation); ``g[:, :, 0]`` is therefore the
same-step voltage, which the circuit solver stamps as an instantaneous
impedance.
"""

from __future__ import annotations

import math
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .circuit.mna import (NewtonConfig, SystemStencil, TransientResult, TransientSolver,
                          _Recorder)
from .errors import Divergence, InvalidArgument, SingularSystem
from .signals import Spectrum, TimeSignal, dft

GAMMA = 0.5
BETA = 0.25
BASIS_TAG = "NewmarkConsistent"


def _is_symmetric(A, rtol=1e-10):
    if sp.issparse(A):
        diff = abs(A - A.T)
        scale = abs(A).max() if A.nnz else 0.0
        return diff.nnz == 0 or diff.max() <= rtol * max(scale, 1e-300)
    A = np.asarray(A)
    scale = np.max(np.abs(A)) if A.size else 0.0
    return np.max(np.abs(A - A.T), initial=0.0) <= rtol * max(scale, 1e-300)


def _min_eig(A):
    return float(np.linalg.eigvalsh(np.asarray(A)).min())


@dataclass(frozen=True, eq=False)
class SecondOrderLTI:
    """Mass/damping/stiffness/coupling description of the EM surrogate.

    Dense or scipy.sparse matrices are accepted. Definiteness is verified by
    eigenvalues for dense systems; sparse systems are checked for symmetry
    and a positive mass diagonal only.
    """

    M: object
    D: object
    K: object
    B: np.ndarray

    def __post_init__(self):
        B = np.array(self.B, dtype=float, copy=True)
        if B.ndim == 1:
            B = B[:, None]
        B.setflags(write=False)
        object.__setattr__(self, "B", B)
        dof = B.shape[0]
        for name in ("M", "D", "K"):
            A = getattr(self, name)
            if sp.issparse(A):
                A = sp.csr_matrix(A, dtype=float)
            else:
                A = np.array(A, dtype=float, copy=True)
                A.setflags(write=False)
            object.__setattr__(self, name, A)
            if A.shape != (dof, dof):
                raise InvalidArgument(f"{name} has shape {A.shape}, expected {(dof, dof)}")
            if not _is_symmetric(A):
                raise InvalidArgument(f"{name} must be symmetric")
        if sp.issparse(self.M):
            if np.any(self.M.diagonal() <= 0):
                raise InvalidArgument("M must be positive definite")
            return
        if _min_eig(self.M) <= 0:
            raise InvalidArgument("M must be positive definite")
        for name in ("D", "K"):
            A = getattr(self, name)
            if sp.issparse(A):
                continue
            if _min_eig(A) < -1e-10 * max(np.max(np.abs(A)), 1e-300):
                raise InvalidArgument(f"{name} must be positive semidefinite")

    @property
    def dof(self) -> int:
        return self.B.shape[0]

    @property
    def n_ports(self) -> int:
        return self.B.shape[1]

    @property
    def is_sparse(self) -> bool:
        return sp.issparse(self.M)


@dataclass
class NewmarkState:
    x: np.ndarray
    xdot: np.ndarray
    xddot: np.ndarray
    step_index: int = 0

    @classmethod
    def rest(cls, dof: int) -> "NewmarkState":
        z = np.zeros(dof)
        return cls(z, z.copy(), z.copy(), 0)


class NewmarkIntegrator:
    """Average-acceleration stepper with the effective matrix factored once.

    ``solver`` is ``"direct"`` (Cholesky / sparse LU) or ``"cg"`` (Jacobi
    preconditioned conjugate gradients to relative residual ``cg_rtol``,
    warm-started from the previous acceleration).
    """

    def __init__(self, sys: SecondOrderLTI, dt: float, solver: str = "direct",
                 cg_rtol: float = 1e-12):
        if not dt > 0:
            raise InvalidArgument(f"dt must be positive, got {dt}")
        if solver not in ("direct", "cg"):
            raise InvalidArgument(f"unknown solver {solver!r}")
        self.sys = sys
        self.dt = dt
        self.solver = solver
        self.cg_rtol = cg_rtol
        self.cg_iterations = 0
        S = sys.M + GAMMA * dt * sys.D + BETA * dt * dt * sys.K
        self.S = S
        if sys.is_sparse:
            S = sp.csc_matrix(S)
            self.S = S
            if solver == "direct":
                try:
                    self._lu = spla.splu(S)
                except RuntimeError as exc:
                    raise SingularSystem(f"Newmark effective matrix: {exc}") from None
            else:
                d = S.diagonal()
                self._precond = spla.LinearOperator(S.shape, matvec=lambda r: r / d, dtype=float)
        else:
            S = np.asarray(S)
            if solver == "direct":
                try:
                    self._chol = scipy.linalg.cho_factor(S)
                except np.linalg.LinAlgError:
                    try:
                        self._lu_dense = scipy.linalg.lu_factor(S)
                    except (ValueError, np.linalg.LinAlgError) as exc:
                        raise SingularSystem(f"Newmark effective matrix: {exc}") from None
                    if np.any(np.diag(self._lu_dense[0]) == 0):
                        raise SingularSystem("Newmark effective matrix is singular")
                    self._chol = None
            else:
                d = np.diag(S).copy()
                self._precond = spla.LinearOperator(S.shape, matvec=lambda r: r / d, dtype=float)

    def solve(self, rhs, x0=None):
        """Apply ``S^-1`` to a vector or to each column of a matrix."""
        rhs = np.asarray(rhs, dtype=float)
        if self.solver == "direct":
            if self.sys.is_sparse:
                return self._lu.solve(rhs)
            if self._chol is not None:
                return scipy.linalg.cho_solve(self._chol, rhs)
            return scipy.linalg.lu_solve(self._lu_dense, rhs)
        if rhs.ndim == 2:
            return np.column_stack([self.solve(rhs[:, k]) for k in range(rhs.shape[1])])
        if not np.any(rhs):
            return np.zeros_like(rhs)
        count = [0]

        def cb(_):
            count[0] += 1

        sol, info = spla.cg(self.S, rhs, x0=x0, rtol=self.cg_rtol, atol=0.0,
                            M=self._precond, maxiter=10 * rhs.size, callback=cb)
        self.cg_iterations += count[0]
        if info != 0:
            raise Divergence(f"conjugate gradients did not reach rtol {self.cg_rtol}")
        return sol

    def step(self, state: NewmarkState, f_next) -> NewmarkState:
        sys, dt = self.sys, self.dt
        v_pred = state.xdot + (1.0 - GAMMA) * dt * state.xddot
        x_pred = state.x + dt * state.xdot + (0.5 - BETA) * dt * dt * state.xddot
        rhs = np.asarray(f_next, dtype=float) - sys.D @ v_pred - sys.K @ x_pred
        if not np.all(np.isfinite(rhs)):
            raise InvalidArgument("non-finite forcing")
        a = self.solve(rhs, x0=state.xddot if self.solver == "cg" else None)
        return NewmarkState(x_pred + BETA * dt * dt * a, v_pred + GAMMA * dt * a, a,
                            state.step_index + 1)

    def instantaneous_impedance(self) -> np.ndarray:
        """``gamma * dt * B^T S^-1 B``: same-step port voltage per unit port current."""
        B = self.sys.B
        return GAMMA * self.dt * (B.T @ self.solve(B))


def newmark_step(sys: SecondOrderLTI, state: NewmarkState, f_next, dt: float) -> NewmarkState:
    return NewmarkIntegrator(sys, dt).step(state, f_next)


# -- port responses --------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PortResponse:
    """Current-to-voltage impulse response ``g[i, j, k]`` (ohms) on the Newmark hat basis."""

    g: np.ndarray
    dt: float
    basis: str = BASIS_TAG

    def __post_init__(self):
        g = np.array(self.g, dtype=float, copy=True)
        if g.ndim == 1:
            g = g[None, None, :]
        if g.ndim != 3 or g.shape[0] != g.shape[1] or g.shape[2] < 1:
            raise InvalidArgument(f"port response must have shape (P, P, N), got {g.shape}")
        if not np.all(np.isfinite(g)):
            raise InvalidArgument("port response contains non-finite samples")
        if not self.dt > 0:
            raise InvalidArgument("dt must be positive")
        if self.basis != BASIS_TAG:
            raise InvalidArgument(f"unknown basis tag {self.basis!r}")
        g.setflags(write=False)
        object.__setattr__(self, "g", g)

    @property
    def n_ports(self) -> int:
        return self.g.shape[0]

    @property
    def n_samples(self) -> int:
        return self.g.shape[2]

    def reciprocity_error(self) -> float:
        scale = np.max(np.abs(self.g))
        if scale == 0:
            return 0.0
        return float(np.max(np.abs(self.g - self.g.transpose(1, 0, 2))) / scale)

    @classmethod
    def resistive(cls, R, dt: float, n_samples: int) -> "PortResponse":
        """Delta response: each port behaves as the resistor ``R[p]``."""
        R = np.atleast_1d(np.asarray(R, dtype=float))
        g = np.zeros((R.size, R.size, n_samples))
        g[np.arange(R.size), np.arange(R.size), 0] = R
        return cls(g, dt)


class CallCounter:
    """Thread-safe counter of per-port extraction runs."""

    def __init__(self):
        self._lock = threading.Lock()
        self.count = 0

    def bump(self):
        with self._lock:
            self.count += 1

    def reset(self):
        with self._lock:
            self.count = 0


EXTRACTION_CALLS = CallCounter()


def extract_port_column(sys: SecondOrderLTI, port: int, dt: float, n_samples: int,
                        integrator: NewmarkIntegrator | None = None) -> np.ndarray:
    """Port voltages (n_ports, n_samples) due to one unit-current basis function on ``port``."""
    if n_samples < 1:
        raise InvalidArgument("n_samples must be >= 1")
    EXTRACTION_CALLS.bump()
    integ = integrator or NewmarkIntegrator(sys, dt)
    B = sys.B
    out = np.zeros((sys.n_ports, n_samples))
    state = NewmarkState.rest(sys.dof)
    zero = np.zeros(sys.dof)
    for n in range(n_samples):
        state = integ.step(state, B[:, port] if n == 0 else zero)
        out[:, n] = B.T @ state.xdot
    return out


def extract_port_response(sys: SecondOrderLTI, dt: float, n_samples: int,
                          solver: str = "direct") -> PortResponse:
    integ = NewmarkIntegrator(sys, dt, solver)
    g = np.zeros((sys.n_ports, sys.n_ports, n_samples))
    for j in range(sys.n_ports):
        g[:, j, :] = extract_port_column(sys, j, dt, n_samples, integ)
    return PortResponse(g, dt)


def _current_matrix(resp: PortResponse, currents) -> np.ndarray:
    if len(currents) != resp.n_ports:
        raise InvalidArgument(f"need {resp.n_ports} current signals, got {len(currents)}")
    n = len(currents[0])
    for c in currents:
        if abs(c.dt - resp.dt) > 1e-12 * resp.dt or len(c) != n:
            raise InvalidArgument("current signals must share the port response grid")
    return np.array([c.samples for c in currents])


def port_convolution_split(resp: PortResponse, currents, upto_step: int):
    """``(g[:, :, 0], history)`` with ``v[n] = g[:, :, 0] @ j[n] + history``."""
    J = _current_matrix(resp, currents)
    n = upto_step
    if not 0 <= n < resp.n_samples or n >= J.shape[1]:
        raise InvalidArgument(f"step {n} outside the available samples")
    if n == 0:
        hist = np.zeros(resp.n_ports)
    else:
        # sum over k < n of g[n-k] j[k]
        hist = np.einsum("pqk,qk->p", resp.g[:, :, n:0:-1], J[:, :n])
    return resp.g[:, :, 0], hist


def port_convolution(resp: PortResponse, currents, upto_step: int) -> np.ndarray:
    """Port voltages at ``upto_step``: ``v_i[n] = sum_j sum_k g[i, j, n-k] j_j[k]``."""
    g0, hist = port_convolution_split(resp, currents, upto_step)
    J = _current_matrix(resp, currents)
    return g0 @ J[:, upto_step] + hist


def convolve_currents(resp: PortResponse, currents) -> list:
    """Port voltage waveforms for whole current waveforms (truncated to their length)."""
    J = _current_matrix(resp, currents)
    n = min(J.shape[1], resp.n_samples)
    out = []
    for i in range(resp.n_ports):
        v = np.zeros(n)
        for j in range(resp.n_ports):
            v += np.convolve(resp.g[i, j, :n], J[j, :n])[:n]
        out.append(TimeSignal(v, resp.dt))
    return out


# -- self-consistent reference solve -------------------------------------------

@dataclass
class CoupledResult(TransientResult):
    """Transient result of the monolithic solve plus its joint-iteration counts."""

    joint_iteration_counts: np.ndarray = field(default=None)
    em_port_voltages: np.ndarray = field(default=None, repr=False)


def solve_self_consistent(sys: SecondOrderLTI, net, dt: float, n_steps: int,
                          cfg: NewtonConfig | None = None, solver: str = "direct",
                          max_joint_iters: int = 50) -> CoupledResult:
    """March the surrogate and the circuit together, iterating each step to consistency.

    Within a step the circuit sees the port as ``v = g0 i + h`` with ``g0`` the
    surrogate's instantaneous impedance; the EM step then returns the true port
    voltage, ``h`` is corrected, and the two alternate (Gauss-Seidel) until
    the port voltages agree to ``cfg.abs_tol``.
    """
    cfg = cfg or NewtonConfig()
    if n_steps < 1:
        raise InvalidArgument("n_steps must be >= 1")
    ports = net.ports
    ids = np.array([p.port_id for p in ports], dtype=int)
    if ids.size and ids.max() >= sys.n_ports:
        raise InvalidArgument(f"netlist uses port {ids.max()} but surrogate has {sys.n_ports}")
    integ = NewmarkIntegrator(sys, dt, solver)
    g0_full = integ.instantaneous_impedance()
    stencil = SystemStencil([net], dt, g0_full if ids.size else None)
    csolver = TransientSolver(stencil, n_steps, cfg)
    rec = _Recorder(stencil, n_steps)
    g0 = g0_full[np.ix_(ids, ids)]
    B = sys.B
    state = NewmarkState.rest(sys.dof)
    h = np.zeros(ids.size)
    joint = np.zeros(n_steps, dtype=int)
    newton = np.zeros(n_steps, dtype=int)
    v_em = np.zeros((sys.n_ports, n_steps))
    i_full = np.zeros(sys.n_ports)
    # CG noise floor: consistency cannot be tighter than the linear solve
    floor = integ.cg_rtol * 10 if solver == "cg" else 0.0

    for n in range(n_steps):
        for k in range(1, max_joint_iters + 1):
            sol = csolver.solve_step(h[None, :] if ids.size else None)
            newton[n] += int(sol.iterations[0])
            i_net = sol.x[0, stencil.port_rows]
            i_full[:] = 0.0
            i_full[ids] = i_net
            trial = integ.step(state, B @ i_full)
            v = B.T @ trial.xdot
            h_new = v[ids] - g0 @ i_net
            tol = cfg.abs_tol + floor * np.max(np.abs(v), initial=0.0)
            if np.all(np.abs(h_new - h) <= tol):
                break
            h = h_new
        else:
            raise Divergence(f"joint EM/circuit iteration did not converge at step {n}", step=n)
        joint[n] = k
        h = h_new
        state = trial
        v_em[:, n] = v
        csolver.accept(sol)
        rec.record(n, sol, csolver)
    base = rec.results(dt)[0]
    return CoupledResult(base.dt, base.node_v, base.branch_i, newton, net,
                         joint_iteration_counts=joint, em_port_voltages=v_em)


# -- reflection coefficient --------------------------------------------------------

def reflection_coefficient(v_port: TimeSignal, i_port: TimeSignal, Z0: float,
                           f0: float | None = None, fbw: float | None = None,
                           invalid_rel: float = 1e-12) -> Spectrum:
    """Gamma(f) = DFT((v - Z0 i)/2) / DFT((v + Z0 i)/2).

    ``i_port`` flows into the port. With ``f0``/``fbw`` the result covers the
    non-negative bins with ``|f - f0| <= fbw``; otherwise all non-negative
    bins. Bins whose incident wave is below ``invalid_rel`` of its in-band
    peak are NaN.
    """
    if not Z0 > 0:
        raise InvalidArgument("Z0 must be positive")
    if len(v_port) != len(i_port) or v_port.dt != i_port.dt:
        raise InvalidArgument("voltage and current must share one grid")
    a = (v_port.samples + Z0 * i_port.samples) / 2.0
    b = (v_port.samples - Z0 * i_port.samples) / 2.0
    A = dft(TimeSignal(a, v_port.dt))
    Bw = dft(TimeSignal(b, v_port.dt))
    n = len(A)
    freqs = A.freqs[: n // 2 + 1]
    if f0 is not None and fbw is not None:
        sel = np.nonzero(np.abs(freqs - f0) <= fbw)[0]
        if sel.size == 0:
            raise InvalidArgument("no DFT bins inside the source band; simulate longer")
    else:
        sel = np.arange(freqs.size)
    Ab, Bb = A.bins[sel], Bw.bins[sel]
    peak = np.max(np.abs(Ab))
    valid = np.abs(Ab) > invalid_rel * peak
    gamma = np.full(sel.size, np.nan + 0j)
    gamma[valid] = Bb[valid] / Ab[valid]
    return Spectrum(gamma, A.df, float(freqs[sel[0]]))


def band_max_abs(spec: Spectrum) -> float:
    mag = np.abs(spec.bins)
    if np.all(np.isnan(mag)):
        raise InvalidArgument("no valid bins")
    return float(np.nanmax(mag))


# -- surrogate factories -------------------------------------------------------------

@dataclass(frozen=True)
class Mode:
    """One resonance: frequency, damping ratio, resonant resistance seen at its home port."""

    freq: float
    zeta: float
    resistance: float
    port: int = 0


def modal_surrogate(modes, n_ports: int | None = None, coupling=None) -> SecondOrderLTI:
    """Diagonal modal surrogate; each mode is a parallel RLC tank at its home port.

    ``coupling[p][q]`` scales how strongly a mode homed at port ``p`` couples
    into port ``q`` (diagonal entries are ignored and taken as 1).
    """
    modes = [m if isinstance(m, Mode) else Mode(*m) for m in modes]
    if not modes:
        raise InvalidArgument("need at least one mode")
    if n_ports is None:
        n_ports = max(m.port for m in modes) + 1
    kappa = np.zeros((n_ports, n_ports)) if coupling is None else np.array(coupling, dtype=float)
    if kappa.shape != (n_ports, n_ports):
        raise InvalidArgument(f"coupling must be {n_ports}x{n_ports}")
    dof = len(modes)
    w = np.array([2 * math.pi * m.freq for m in modes])
    zeta = np.array([m.zeta for m in modes])
    if np.any(w <= 0) or np.any(zeta < 0):
        raise InvalidArgument("mode frequencies must be positive and damping non-negative")
    B = np.zeros((dof, n_ports))
    for k, m in enumerate(modes):
        if not 0 <= m.port < n_ports:
            raise InvalidArgument(f"mode port {m.port} out of range")
        if zeta[k] == 0:
            raise InvalidArgument("resonant resistance needs zeta > 0")
        b = math.sqrt(m.resistance * 2 * zeta[k] * w[k])
        B[k] = kappa[m.port] * b
        B[k, m.port] = b
    return SecondOrderLTI(np.eye(dof), np.diag(2 * zeta * w), np.diag(w * w), B)


def grid_surrogate(nx: int, ny: int, fundamental: float, zeta: float, resistance: float,
                   port_cells) -> SecondOrderLTI:
    """Sparse 2-D membrane (5-point Laplacian, Dirichlet walls) with point-coupled ports.

    The wave speed is chosen so the lowest cavity mode sits at ``fundamental``
    Hz; damping is mass-proportional with ratio ``zeta`` at that mode, and the
    coupling is scaled so the lowest mode presents ``resistance`` ohms at the
    first port. Stands in for a large FE discretisation in cost studies.
    """
    if nx < 2 or ny < 2:
        raise InvalidArgument("grid needs at least 2x2 cells")
    # unit-spacing Laplacian; lowest eigenvalue is known in closed form
    def lap(n):
        return sp.diags([-np.ones(n - 1), 2 * np.ones(n), -np.ones(n - 1)], [-1, 0, 1])

    L = sp.kronsum(lap(nx), lap(ny), format="csr")
    lam1 = (2 - 2 * math.cos(math.pi / (nx + 1))) + (2 - 2 * math.cos(math.pi / (ny + 1)))
    w1 = 2 * math.pi * fundamental
    K = (w1 * w1 / lam1) * L
    dof = nx * ny
    M = sp.identity(dof, format="csr")
    D = (2 * zeta * w1) * M
    B = np.zeros((dof, len(port_cells)))
    phi = None
    for p, (ix, iy) in enumerate(port_cells):
        if not (0 <= ix < nx and 0 <= iy < ny):
            raise InvalidArgument(f"port cell {(ix, iy)} outside grid")
        s = (math.sin(math.pi * (ix + 1) / (nx + 1)) * math.sin(math.pi * (iy + 1) / (ny + 1))
             * 2 / math.sqrt((nx + 1) * (ny + 1)))
        if phi is None:
            phi = s
        # kronsum(A, B) orders the second factor slowest
        B[iy * nx + ix, p] = 1.0
    if phi == 0:
        raise InvalidArgument("first port sits on a nodal line of the lowest mode")
    b = math.sqrt(resistance * 2 * zeta * w1) / abs(phi)
    return SecondOrderLTI(M, D, K.tocsr(), B * b)


# -- persistence -----------------------------------------------------------------------

def save_port_response(resp: PortResponse, path) -> Path:
    path = Path(path)
    P, _, N = resp.g.shape
    with open(path, "w") as fh:
        fh.write(f"# portresponse n_ports={P} dt={resp.dt!r} n_samples={N} basis={resp.basis}\n")
        for i in range(P):
            for j in range(P):
                fh.write(f"{i},{j}," + ",".join("%.17g" % v for v in resp.g[i, j]) + "\n")
    return path


def load_port_response(path) -> PortResponse:
    path = Path(path)
    with open(path) as fh:
        header = fh.readline()
        if not header.startswith("# portresponse"):
            raise InvalidArgument(f"{path}: missing port response header")
        meta = dict(tok.split("=", 1) for tok in header.split()[2:])
        try:
            P, N, dt = int(meta["n_ports"]), int(meta["n_samples"]), float(meta["dt"])
            basis = meta["basis"]
        except (KeyError, ValueError) as exc:
            raise InvalidArgument(f"{path}: bad header ({exc})") from None
        g = np.full((P, P, N), np.nan)
        seen = 0
        for line in fh:
            parts = line.strip().split(",")
            if not parts or parts == [""]:
                continue
            i, j = int(parts[0]), int(parts[1])
            row = np.array([float(x) for x in parts[2:]])
            if row.size != N or not (0 <= i < P and 0 <= j < P):
                raise InvalidArgument(f"{path}: malformed row for pair ({i}, {j})")
            g[i, j] = row
            seen += 1
    if seen != P * P:
        raise InvalidArgument(f"{path}: expected {P * P} rows, found {seen}")
    return PortResponse(g, dt, basis)


def timed(fn, *args, **kwargs):
    t = time.perf_counter()
    out = fn(*args, **kwargs)
    return out, time.perf_counter() - t
