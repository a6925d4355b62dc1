"""Diode physics: thermal voltage and the Shockley characteristic."""

import math

import numpy as np

from ..errors import InvalidArgument

K_BOLTZMANN = 1.380649e-23
Q_ELECTRON = 1.602177e-19

# exponent beyond which the diode curve continues along its tangent line
EXP_CLAMP = 40.0


def thermal_voltage(T):
    """k_B * T / q in volts."""
    temp = np.asarray(T, dtype=float)
    if np.any(~(temp > 0)):
        raise InvalidArgument(f"temperature must be positive, got {T}")
    vt = K_BOLTZMANN * temp / Q_ELECTRON
    return float(vt) if vt.ndim == 0 else vt


def shockley(v, Is, n, T):
    """Vectorised diode current and conductance.

    For exponents above ``EXP_CLAMP`` the exponential is replaced by its
    tangent line, keeping both values finite and the derivative continuous.
    """
    nvt = n * thermal_voltage(T)
    x = np.asarray(v, dtype=float) / nvt
    xc = np.minimum(x, EXP_CLAMP)
    e = np.exp(xc)
    over = x - xc
    i = Is * (e * (1.0 + over) - 1.0)
    g = Is * e / nvt
    return i, g


def diode_iv(v: float, d) -> tuple:
    """Current and small-signal conductance of diode ``d`` at junction voltage ``v``."""
    if not math.isfinite(v):
        raise InvalidArgument(f"junction voltage must be finite, got {v}")
    i, g = shockley(v, d.Is, d.n, d.T)
    return float(i), float(g)
