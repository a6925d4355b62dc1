"""Netlist data model and the line-oriented netlist parser.

Grammar, one element per line (``#`` starts a comment)::

    R1 1 0 50            resistor, ohms
    C1 2 0 5.4p          capacitor, farads
    L1 2 3 1n            inductor, henries
    V1 1 0 F0=10e9 FBW=2e9 AMP=1 DELAY=0     modulated-Gaussian source
    V2 1 0 DC=1          constant source (switched on at step 0)
    D1 2 0 IS=1e-9 N=1 T=293                 Shockley diode, anode first
    P1 3 0 PORT=0        EM port element

Values accept the usual SPICE scale suffixes (f p n u m k meg g t).
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Union

from ..errors import NetlistError
from ..signals import SourceSpec, source_value

DEFAULT_IS = 4.86e-9
DEFAULT_N = 1.02
DEFAULT_T = 300.0


@dataclass(frozen=True)
class Resistor:
    name: str
    n_plus: int
    n_minus: int
    R: float


@dataclass(frozen=True)
class Capacitor:
    name: str
    n_plus: int
    n_minus: int
    C: float


@dataclass(frozen=True)
class Inductor:
    name: str
    n_plus: int
    n_minus: int
    L: float


@dataclass(frozen=True)
class VoltageSource:
    """Ideal source; value = dc + spec waveform (if any) + waveform(t) (if any)."""

    name: str
    n_plus: int
    n_minus: int
    spec: Optional[SourceSpec] = None
    dc: float = 0.0
    waveform: Optional[Callable[[float], float]] = field(default=None, compare=False)

    def value(self, t: float, dt: float) -> float:
        v = self.dc
        if self.spec is not None:
            v += source_value(self.spec, t, dt)
        if self.waveform is not None:
            v += float(self.waveform(t))
        return v


@dataclass(frozen=True)
class Diode:
    name: str
    n_plus: int
    n_minus: int
    Is: float = DEFAULT_IS
    n: float = DEFAULT_N
    T: float = DEFAULT_T


@dataclass(frozen=True)
class EMPort:
    name: str
    n_plus: int
    n_minus: int
    port_id: int


Element = Union[Resistor, Capacitor, Inductor, VoltageSource, Diode, EMPort]


def _check_element(el) -> None:
    if isinstance(el, Resistor) and not el.R > 0:
        raise NetlistError(f"{el.name}: resistance must be positive")
    if isinstance(el, Capacitor) and not el.C > 0:
        raise NetlistError(f"{el.name}: capacitance must be positive")
    if isinstance(el, Inductor) and not el.L > 0:
        raise NetlistError(f"{el.name}: inductance must be positive")
    if isinstance(el, Diode):
        if not el.Is > 0:
            raise NetlistError(f"{el.name}: IS must be positive")
        if not el.n >= 1:
            raise NetlistError(f"{el.name}: N must be >= 1")
        if not 250 <= el.T <= 400:
            raise NetlistError(f"{el.name}: T must lie in [250, 400] K")
    if isinstance(el, EMPort) and el.port_id < 0:
        raise NetlistError(f"{el.name}: PORT must be >= 0")


@dataclass(frozen=True)
class Netlist:
    node_count: int
    elements: tuple

    def __post_init__(self):
        object.__setattr__(self, "elements", tuple(self.elements))
        names = set()
        touches_ground = False
        ports = set()
        for el in self.elements:
            for node in (el.n_plus, el.n_minus):
                if not 0 <= node < self.node_count:
                    raise NetlistError(f"{el.name}: node {node} out of range 0..{self.node_count - 1}")
            if el.n_plus == el.n_minus:
                raise NetlistError(f"{el.name}: both terminals on node {el.n_plus}")
            if el.name in names:
                raise NetlistError(f"duplicate element name {el.name}")
            names.add(el.name)
            touches_ground |= 0 in (el.n_plus, el.n_minus)
            if isinstance(el, EMPort):
                if el.port_id in ports:
                    raise NetlistError(f"{el.name}: port {el.port_id} bound twice")
                ports.add(el.port_id)
            _check_element(el)
        if self.elements and not touches_ground:
            raise NetlistError("no element references ground (node 0)")

    @classmethod
    def from_elements(cls, elements) -> "Netlist":
        elements = tuple(elements)
        top = max((max(e.n_plus, e.n_minus) for e in elements), default=0)
        return cls(top + 1, elements)

    def of_kind(self, kind) -> list:
        return [e for e in self.elements if isinstance(e, kind)]

    @property
    def ports(self) -> list:
        return self.of_kind(EMPort)

    @property
    def is_linear(self) -> bool:
        return not self.of_kind(Diode)

    def element(self, name: str):
        for e in self.elements:
            if e.name == name:
                return e
        raise KeyError(name)

    def replace_element(self, name: str, **changes) -> "Netlist":
        """Copy of the netlist with one element's parameters changed."""
        self.element(name)
        new = [replace(e, **changes) if e.name == name else e for e in self.elements]
        return Netlist(self.node_count, new)

    def topology(self) -> tuple:
        """Hashable key equal for netlists that differ only in element values."""
        return (self.node_count,) + tuple(
            (type(e).__name__, e.name, e.n_plus, e.n_minus) for e in self.elements)

    def to_text(self) -> str:
        return "\n".join(format_element(e) for e in self.elements) + "\n"


# -- parsing -------------------------------------------------------------------

_SUFFIX = {"f": 1e-15, "p": 1e-12, "n": 1e-9, "u": 1e-6, "m": 1e-3,
           "k": 1e3, "meg": 1e6, "g": 1e9, "t": 1e12}
_NUM = re.compile(r"^([+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)(meg|[fpnumkgt])?$", re.I)


def parse_value(token: str) -> float:
    m = _NUM.match(token.strip())
    if not m:
        raise ValueError(f"bad numeric value {token!r}")
    scale = _SUFFIX[m.group(2).lower()] if m.group(2) else 1.0
    return float(m.group(1)) * scale


def _params(tokens, allowed, lineno):
    out = {}
    for tok in tokens:
        key, sep, value = tok.partition("=")
        key = key.upper()
        if not sep or key not in allowed:
            raise NetlistError(f"unexpected parameter {tok!r}", lineno)
        try:
            out[key] = parse_value(value)
        except ValueError as exc:
            raise NetlistError(str(exc), lineno) from None
    return out


def _parse_line(tokens, lineno):
    name = tokens[0]
    kind = name[0].upper()
    if len(tokens) < 3:
        raise NetlistError(f"{name}: expected 'NAME node+ node- params...'", lineno)
    try:
        n_plus, n_minus = int(tokens[1]), int(tokens[2])
    except ValueError:
        raise NetlistError(f"{name}: node indices must be integers", lineno) from None
    rest = tokens[3:]

    if kind in "RCL":
        if len(rest) != 1:
            raise NetlistError(f"{name}: expected exactly one value", lineno)
        try:
            value = parse_value(rest[0].split("=")[-1])
        except ValueError as exc:
            raise NetlistError(str(exc), lineno) from None
        cls = {"R": Resistor, "C": Capacitor, "L": Inductor}[kind]
        return cls(name, n_plus, n_minus, value)
    if kind == "V":
        p = _params(rest, {"F0", "FBW", "AMP", "DELAY", "DC"}, lineno)
        spec = None
        if "F0" in p or "FBW" in p:
            if "F0" not in p or "FBW" not in p:
                raise NetlistError(f"{name}: F0 and FBW must be given together", lineno)
            delay = p.get("DELAY", 0)
            if delay != int(delay):
                raise NetlistError(f"{name}: DELAY must be an integer step count", lineno)
            spec = SourceSpec(p["F0"], p["FBW"], p.get("AMP", 1.0), int(delay))
        elif "AMP" in p or "DELAY" in p:
            raise NetlistError(f"{name}: AMP/DELAY need F0 and FBW", lineno)
        return VoltageSource(name, n_plus, n_minus, spec=spec, dc=p.get("DC", 0.0))
    if kind == "D":
        p = _params(rest, {"IS", "N", "T"}, lineno)
        return Diode(name, n_plus, n_minus, p.get("IS", DEFAULT_IS), p.get("N", DEFAULT_N),
                     p.get("T", DEFAULT_T))
    if kind == "P":
        p = _params(rest, {"PORT"}, lineno)
        if "PORT" not in p or p["PORT"] != int(p["PORT"]):
            raise NetlistError(f"{name}: PORT=<integer> is required", lineno)
        return EMPort(name, n_plus, n_minus, int(p["PORT"]))
    raise NetlistError(f"unknown element kind {kind!r} in {name}", lineno)


def parse_netlist(text: str) -> Netlist:
    elements = []
    lines = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        el = _parse_line(line.split(), lineno)
        try:
            _check_element(el)
        except NetlistError as exc:
            raise NetlistError(str(exc), lineno) from None
        if el.name in lines:
            raise NetlistError(f"duplicate element name {el.name} (first on line {lines[el.name]})", lineno)
        lines[el.name] = lineno
        elements.append(el)
    if not elements:
        raise NetlistError("netlist has no elements")
    try:
        return Netlist.from_elements(elements)
    except NetlistError as exc:
        bad = next((lines[n] for n in lines if n in str(exc)), None)
        raise NetlistError(str(exc), bad) from None


def format_element(e) -> str:
    head = f"{e.name} {e.n_plus} {e.n_minus}"
    if isinstance(e, Resistor):
        return f"{head} {e.R!r}"
    if isinstance(e, Capacitor):
        return f"{head} {e.C!r}"
    if isinstance(e, Inductor):
        return f"{head} {e.L!r}"
    if isinstance(e, VoltageSource):
        if e.waveform is not None:
            raise NetlistError(f"{e.name}: callable waveforms cannot be serialized")
        parts = []
        if e.spec is not None:
            s = e.spec
            parts.append(f"F0={s.f0!r} FBW={s.fbw!r} AMP={s.amplitude!r} DELAY={s.delay_steps}")
        if e.dc or e.spec is None:
            parts.append(f"DC={e.dc!r}")
        return f"{head} {' '.join(parts)}"
    if isinstance(e, Diode):
        return f"{head} IS={e.Is!r} N={e.n!r} T={e.T!r}"
    if isinstance(e, EMPort):
        return f"{head} PORT={e.port_id}"
    raise TypeError(type(e))
