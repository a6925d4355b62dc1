"""Analytic adaptive-array model: steering, received signals, covariance, SINR.

Conventions: the array output is ``y = w^T x`` and covariances are
``Phi = E{x^* x^T}``, so a component's output power is ``w^H Phi w``.
Elements sit half a wavelength apart; element ``m`` of the steering vector is
``exp(j m pi sin(theta))``. Array signals are complex analytic waveforms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import chebyshev as C
from numpy.polynomial import polynomial as P

from .errors import DegenerateReference, InvalidArgument
from .signals import SourceSpec, TimeSignal, default_timestep, gaussian_envelope


@dataclass(frozen=True, eq=False)
class WeightVector:
    magnitudes: np.ndarray
    phases: np.ndarray

    def __post_init__(self):
        mag = np.array(self.magnitudes, dtype=float).reshape(-1)
        ph = np.array(self.phases, dtype=float).reshape(-1)
        if mag.size < 1 or mag.size != ph.size:
            raise InvalidArgument("magnitudes and phases must be equal-length and non-empty")
        if not np.all(np.isfinite(mag)) or np.any(mag < 0):
            raise InvalidArgument("magnitudes must be finite and non-negative")
        object.__setattr__(self, "magnitudes", mag)
        object.__setattr__(self, "phases", ph)

    @classmethod
    def from_complex(cls, w) -> "WeightVector":
        w = np.asarray(w, dtype=complex)
        return cls(np.abs(w), np.angle(w))

    @property
    def complex(self) -> np.ndarray:
        return self.magnitudes * np.exp(1j * self.phases)

    def __len__(self):
        return self.magnitudes.size


def _w(w) -> np.ndarray:
    return w.complex if isinstance(w, WeightVector) else np.asarray(w, dtype=complex).reshape(-1)


@dataclass(frozen=True, eq=False)
class CovarianceMatrix:
    entries: np.ndarray

    def __post_init__(self):
        E = np.array(self.entries, dtype=complex)
        if E.ndim != 2 or E.shape[0] != E.shape[1]:
            raise InvalidArgument("covariance must be square")
        scale = max(float(np.max(np.abs(E))), 1e-300)
        if np.max(np.abs(E - E.conj().T)) > 1e-10 * scale:
            raise InvalidArgument("covariance must be Hermitian")
        if np.linalg.eigvalsh(E).min() < -1e-10 * max(float(np.trace(E).real), 1e-300):
            raise InvalidArgument("covariance must be positive semidefinite")
        E.setflags(write=False)
        object.__setattr__(self, "entries", E)

    def __add__(self, other: "CovarianceMatrix") -> "CovarianceMatrix":
        return CovarianceMatrix(self.entries + other.entries)

    @property
    def N(self) -> int:
        return self.entries.shape[0]


def _phi(phi) -> np.ndarray:
    return phi.entries if isinstance(phi, CovarianceMatrix) else np.asarray(phi, dtype=complex)


def steering_vector(theta: float, N: int) -> np.ndarray:
    if N < 1:
        raise InvalidArgument("N must be >= 1")
    return np.exp(1j * np.arange(N) * math.pi * math.sin(theta))


def array_factor(weights, theta) -> np.ndarray:
    """``w^T u(theta)`` for each angle in ``theta``."""
    w = _w(weights)
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    m = np.arange(w.size)
    return np.exp(1j * np.outer(np.sin(theta), m) * math.pi) @ w


# -- scenario & received signal ------------------------------------------------------

@dataclass(frozen=True)
class Desired:
    theta: float
    waveform: SourceSpec


@dataclass(frozen=True)
class Interferer:
    schedule: tuple  # ((start_step, theta), ...)
    waveform: SourceSpec
    power_dB_rel: float = 20.0

    def __post_init__(self):
        sched = tuple((int(s), float(th)) for s, th in self.schedule)
        if not sched or sched[0][0] != 0:
            raise InvalidArgument("interference schedule must start at step 0")
        if any(b[0] <= a[0] for a, b in zip(sched, sched[1:])):
            raise InvalidArgument("schedule start steps must be strictly increasing")
        if any(abs(th) > math.pi / 2 for _, th in sched):
            raise InvalidArgument("angles must satisfy |theta| <= pi/2")
        object.__setattr__(self, "schedule", sched)

    def theta_at(self, steps) -> np.ndarray:
        starts = np.array([s for s, _ in self.schedule])
        thetas = np.array([th for _, th in self.schedule])
        return thetas[np.searchsorted(starts, np.asarray(steps), side="right") - 1]


@dataclass(frozen=True)
class ArrayScenario:
    N: int
    f0: float
    fbw: float
    desired: Desired
    interferers: tuple = ()
    noise_power_dB_rel: float = -20.0
    seed: int = 0
    dt: float | None = None

    def __post_init__(self):
        if self.N < 2:
            raise InvalidArgument("array needs N >= 2 elements")
        if abs(self.desired.theta) > math.pi / 2:
            raise InvalidArgument("desired angle must satisfy |theta| <= pi/2")
        object.__setattr__(self, "interferers", tuple(self.interferers))
        if self.dt is None:
            object.__setattr__(self, "dt", default_timestep(self.f0, self.fbw))


def analytic_source(spec: SourceSpec, dt: float, n: int) -> np.ndarray:
    """Complex analytic form ``A exp(j 2 pi f0 t) env(t)`` of the modulated Gaussian."""
    k = np.arange(n) - spec.delay_steps
    t = np.maximum(k, 0) * dt
    a = spec.amplitude * np.exp(2j * math.pi * spec.f0 * t) * gaussian_envelope(spec, t)
    return np.where(k >= 0, a, 0.0)


@dataclass
class ReceivedSignal:
    """Received samples, shape (n_steps, N), with the ground-truth decomposition kept."""

    desired: np.ndarray
    interference: np.ndarray
    noise: np.ndarray
    desired_amplitude: np.ndarray = field(repr=False)

    @property
    def total(self) -> np.ndarray:
        return self.desired + self.interference + self.noise

    @property
    def undesired(self) -> np.ndarray:
        return self.interference + self.noise


def synthesize_received(s: ArrayScenario, n_steps: int) -> ReceivedSignal:
    if n_steps < 1:
        raise InvalidArgument("n_steps must be >= 1")
    a_d = analytic_source(s.desired.waveform, s.dt, n_steps)
    desired = np.outer(a_d, steering_vector(s.desired.theta, s.N))
    interference = np.zeros((n_steps, s.N), dtype=complex)
    m = np.arange(s.N)
    steps = np.arange(n_steps)
    for intf in s.interferers:
        a_i = analytic_source(intf.waveform, s.dt, n_steps) * 10 ** (intf.power_dB_rel / 20)
        th = intf.theta_at(steps)
        interference += a_i[:, None] * np.exp(1j * math.pi * np.outer(np.sin(th), m))
    # noise power is relative to the desired waveform's peak power
    ref = s.desired.waveform.amplitude ** 2
    var = ref * 10 ** (s.noise_power_dB_rel / 10)
    rng = np.random.default_rng(s.seed)
    noise = math.sqrt(var / 2) * (rng.standard_normal((n_steps, s.N))
                                  + 1j * rng.standard_normal((n_steps, s.N)))
    return ReceivedSignal(desired, interference, noise, a_d)


def estimate_covariance(x_block) -> CovarianceMatrix:
    x = np.asarray(x_block, dtype=complex)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[0] < 1:
        raise InvalidArgument("covariance window is empty")
    phi = x.conj().T @ x / x.shape[0]
    return CovarianceMatrix((phi + phi.conj().T) / 2)


def signal_power(w, phi) -> float:
    w, E = _w(w), _phi(phi)
    if E.shape != (w.size, w.size):
        raise InvalidArgument(f"weights of length {w.size} vs covariance {E.shape}")
    p = np.vdot(w, E @ w)
    if abs(p.imag) > 1e-10 * max(abs(p), 1e-300):
        raise InvalidArgument(f"w^H Phi w has an imaginary part {p.imag}; Phi not Hermitian?")
    return float(p.real)


def sinr(w, desired_power: float, theta_d: float, phi_undesired) -> float:
    """Ground-truth SINR: ``a^2 |w^T u_d|^2 / (w^H (Phi_i + Phi_n) w)``."""
    wc = _w(w)
    num = desired_power * abs(wc @ steering_vector(theta_d, wc.size)) ** 2
    den = signal_power(wc, phi_undesired)
    if den <= 0:
        return math.inf
    return num / den


def applebaum_modified_cost(w, phi_total, theta_d: float) -> float:
    """Realisable Applebaum cost ``|w^T u_d|^2 / (w^H Phi_total w)``; larger is better."""
    wc = _w(w)
    den = signal_power(wc, phi_total)
    if not den > 0:
        raise InvalidArgument("zero output power; weights rejected")
    return abs(wc @ steering_vector(theta_d, wc.size)) ** 2 / den


def dolph_chebyshev_amplitudes(N: int, sidelobe_dB: float) -> np.ndarray:
    """Dolph-Chebyshev taper for a broadside array, peak-normalised to 1.

    The array factor is ``T_{N-1}(x0 cos(psi/2))`` with ``T_{N-1}(x0)`` equal
    to the main-to-sidelobe voltage ratio. Substituting
    ``cos(psi/2) = (u + 1/u)/2`` with ``u^2 = exp(j psi)`` and collecting the
    even powers of ``u`` gives the element amplitudes.
    """
    if N < 3:
        raise InvalidArgument("Dolph-Chebyshev taper needs N >= 3")
    if not sidelobe_dB > 0:
        raise InvalidArgument("sidelobe level must be positive dB")
    order = N - 1
    ratio = 10 ** (sidelobe_dB / 20)
    x0 = math.cosh(math.acosh(ratio) / order)
    c = C.cheb2poly(C.Chebyshev.basis(order).coef)
    poly_u = np.zeros(2 * order + 1)
    half = np.array([1.0, 0.0, 1.0]) / 2  # (u^2 + 1)/2
    for k, ck in enumerate(c):
        if ck == 0:
            continue
        term = np.array([ck * x0 ** k])
        for _ in range(k):
            term = P.polymul(term, half)
        # multiply by u^(order - k): degree shift
        shifted = np.zeros(2 * order + 1)
        shifted[order - k: order - k + term.size] = term
        poly_u += shifted
    amps = poly_u[0::2]
    return amps / amps.max()


def phase_from_delay(v_source: TimeSignal, v_port: TimeSignal, f0: float) -> float:
    """Phase lag ``2 pi f0 delay`` of ``v_port`` relative to ``v_source``, in (-pi, pi].

    The delay is the cross-correlation peak refined by a parabola through the
    three samples around it.
    """
    if len(v_source) != len(v_port) or v_source.dt != v_port.dt:
        raise InvalidArgument("signals must share one grid")
    a, b = v_source.samples, v_port.samples
    if not np.any(a) or not np.any(b):
        raise InvalidArgument("cannot measure a delay against an all-zero signal")
    c = np.correlate(b, a, mode="full")
    k = int(np.argmax(c))
    frac = 0.0
    if 0 < k < c.size - 1:
        den = c[k - 1] - 2 * c[k] + c[k + 1]
        if den != 0:
            frac = 0.5 * (c[k - 1] - c[k + 1]) / den
    lag = k - (a.size - 1) + frac
    return wrap_phase(2 * math.pi * f0 * lag * v_source.dt)


def wrap_phase(phi: float) -> float:
    return math.pi - (math.pi - phi) % (2 * math.pi)


def phasor_at(sig: TimeSignal, f: float) -> complex:
    """Discrete-time Fourier transform of ``sig`` at frequency ``f`` (volt-seconds)."""
    t = sig.times
    if not np.any(sig.samples):
        raise DegenerateReference("signal is identically zero")
    return complex(np.sum(sig.samples * np.exp(-2j * math.pi * f * t)) * sig.dt)
