"""Sampled waveforms, the modulated-Gaussian source, spectra and error norms.

DFT convention: ``X[m] = sum_k x[k] exp(-2j*pi*m*k/N)`` with no scaling on
the forward transform, so Parseval reads ``sum |x|^2 == sum |X|^2 / N``.
Bin ``m`` sits at ``f0 + m*df`` with ``df = 1/(N*dt)``; bins above N/2 are
the negative frequencies, as numpy orders them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DegenerateReference, InvalidArgument

_FMT = "%.17g"


def _frozen(values, dtype) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True).reshape(-1)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class TimeSignal:
    samples: np.ndarray
    dt: float
    t0: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "samples", _frozen(self.samples, float))
        if not self.dt > 0:
            raise InvalidArgument(f"dt must be positive, got {self.dt}")
        if self.samples.size == 0:
            raise InvalidArgument("TimeSignal needs at least one sample")

    def __len__(self):
        return self.samples.size

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.samples.size)

    def same_grid(self, other: "TimeSignal") -> bool:
        return len(self) == len(other) and self.dt == other.dt and self.t0 == other.t0


@dataclass(frozen=True, eq=False)
class Spectrum:
    bins: np.ndarray
    df: float
    f0: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "bins", _frozen(self.bins, complex))
        if not self.df > 0:
            raise InvalidArgument(f"df must be positive, got {self.df}")
        if self.bins.size == 0:
            raise InvalidArgument("Spectrum needs at least one bin")

    def __len__(self):
        return self.bins.size

    @property
    def freqs(self) -> np.ndarray:
        return self.f0 + self.df * np.arange(self.bins.size)

    def magnitude(self) -> np.ndarray:
        return np.abs(self.bins)


@dataclass(frozen=True)
class SourceSpec:
    """Modulated-Gaussian voltage source.

    ``delay_steps`` shifts the waveform by whole timesteps when it is sampled;
    the source is exactly zero before its (delayed) start.
    """

    f0: float
    fbw: float
    amplitude: float = 1.0
    delay_steps: int = 0

    def __post_init__(self):
        if not self.f0 > 0:
            raise InvalidArgument(f"f0 must be positive, got {self.f0}")
        if not self.fbw > 0:
            raise InvalidArgument(f"fbw must be positive, got {self.fbw}")
        if not self.amplitude >= 0:
            raise InvalidArgument(f"amplitude must be >= 0, got {self.amplitude}")
        if int(self.delay_steps) != self.delay_steps or self.delay_steps < 0:
            raise InvalidArgument(f"delay_steps must be a non-negative integer, got {self.delay_steps}")
        object.__setattr__(self, "delay_steps", int(self.delay_steps))

    @property
    def sigma(self) -> float:
        return 3.0 / (2.0 * math.pi * self.fbw)


def gaussian_envelope(spec: SourceSpec, t):
    s = spec.sigma
    t = np.asarray(t, dtype=float)
    return np.exp(-((t - 6.0 * s) ** 2) / (2.0 * s * s))


def gaussian_cosine_source(spec: SourceSpec, t):
    """amplitude * cos(2 pi f0 t) * exp(-(t - 6 sigma)^2 / (2 sigma^2)), no delay applied."""
    t = np.asarray(t, dtype=float)
    out = spec.amplitude * np.cos(2.0 * math.pi * spec.f0 * t) * gaussian_envelope(spec, t)
    return float(out) if out.ndim == 0 else out


def source_value(spec: SourceSpec, t: float, dt: float) -> float:
    """Source voltage at absolute time ``t`` with the sample delay applied."""
    tau = t - spec.delay_steps * dt
    if tau < 0:
        return 0.0
    return gaussian_cosine_source(spec, tau)


def sample_source(spec: SourceSpec, dt: float, n: int) -> TimeSignal:
    if n < 1:
        raise InvalidArgument("need at least one sample")
    k = np.arange(n) - spec.delay_steps
    tau = k * dt
    values = np.where(k >= 0, gaussian_cosine_source(spec, np.maximum(tau, 0.0)), 0.0)
    return TimeSignal(values, dt)


def default_timestep(f0: float, fbw: float) -> float:
    total = f0 + fbw
    if not total > 0:
        raise InvalidArgument(f"f0 + fbw must be positive, got {total}")
    return 1.0 / (20.0 * total)


def dft(sig: TimeSignal) -> Spectrum:
    n = len(sig)
    if n < 2:
        raise InvalidArgument("dft needs at least two samples")
    return Spectrum(np.fft.fft(sig.samples), 1.0 / (n * sig.dt), 0.0)


def one_sided(spec: Spectrum) -> Spectrum:
    """Non-negative frequency bins of a full two-sided spectrum."""
    n = len(spec)
    return Spectrum(spec.bins[: n // 2 + 1], spec.df, spec.f0)


def bin_index(spec: Spectrum, freq: float) -> int:
    return int(round((freq - spec.f0) / spec.df))


def relative_l1_spectral_error(test: Spectrum, ref: Spectrum) -> float:
    if len(test) != len(ref) or test.df != ref.df or test.f0 != ref.f0:
        raise InvalidArgument("spectra are on different frequency grids")
    denom = float(np.sum(np.abs(ref.bins)))
    if denom == 0.0:
        raise DegenerateReference("reference spectrum is identically zero")
    return float(np.sum(np.abs(np.abs(test.bins) - np.abs(ref.bins)))) / denom


def _check_grid(a: TimeSignal, b: TimeSignal):
    if len(a) != len(b) or a.dt != b.dt:
        raise InvalidArgument(
            f"signals are on different grids ({len(a)} @ {a.dt} vs {len(b)} @ {b.dt})")


def l2_norm(a: TimeSignal) -> float:
    return math.sqrt(float(np.sum(a.samples ** 2)) * a.dt)


def l2_difference(a: TimeSignal, b: TimeSignal) -> float:
    _check_grid(a, b)
    return math.sqrt(float(np.sum((a.samples - b.samples) ** 2)) * a.dt)


def relative_l2_difference(a: TimeSignal, b: TimeSignal) -> float:
    """``l2_difference(a, b) / ||b||``; ``b`` is the reference."""
    diff = l2_difference(a, b)
    ref = l2_norm(b)
    if ref == 0.0:
        raise DegenerateReference("reference signal is identically zero")
    return diff / ref


# -- CSV ---------------------------------------------------------------------

def save_signal_csv(sig: TimeSignal, path) -> Path:
    path = Path(path)
    header = f"dt={sig.dt!r} t0={sig.t0!r}\ntime_s,value"
    np.savetxt(path, np.column_stack([sig.times, sig.samples]), delimiter=",",
               fmt=_FMT, header=header)
    return path


def _read_meta(path: Path) -> dict:
    meta = {}
    with open(path) as fh:
        first = fh.readline()
    if first.startswith("#"):
        for token in first[1:].split():
            key, _, value = token.partition("=")
            meta[key] = float(value)
    return meta


def load_signal_csv(path) -> TimeSignal:
    path = Path(path)
    data = np.loadtxt(path, delimiter=",", comments="#", ndmin=2)
    meta = _read_meta(path)
    if "dt" in meta:
        dt, t0 = meta["dt"], meta.get("t0", 0.0)
    else:
        if data.shape[0] < 2:
            raise InvalidArgument(f"{path}: cannot infer dt from a single row")
        dt, t0 = float(data[1, 0] - data[0, 0]), float(data[0, 0])
    return TimeSignal(data[:, 1], dt, t0)


def save_spectrum_csv(spec: Spectrum, path) -> Path:
    path = Path(path)
    header = f"df={spec.df!r} f0={spec.f0!r}\nfreq_hz,real,imag"
    np.savetxt(path, np.column_stack([spec.freqs, spec.bins.real, spec.bins.imag]),
               delimiter=",", fmt=_FMT, header=header)
    return path


def load_spectrum_csv(path) -> Spectrum:
    path = Path(path)
    data = np.loadtxt(path, delimiter=",", comments="#", ndmin=2)
    meta = _read_meta(path)
    if "df" in meta:
        df, f0 = meta["df"], meta.get("f0", 0.0)
    else:
        df, f0 = float(data[1, 0] - data[0, 0]), float(data[0, 0])
    return Spectrum(data[:, 1] + 1j * data[:, 2], df, f0)
