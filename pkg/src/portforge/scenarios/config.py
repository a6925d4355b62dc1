"""Scenario configuration files (TOML) and their validation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from string import Template

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from ..circuit import Netlist, NewtonConfig, parse_netlist
from ..emport import Mode, SecondOrderLTI, grid_surrogate, modal_surrogate
from ..errors import ConfigError, InvalidArgument
from ..optimize import DesignVector, GAConfig, Gene
from ..signals import SourceSpec, default_timestep

KINDS = ("validation", "reflection_multiobjective", "nonlinear_filter", "adaptive_sinr")

REQUIRED = {
    "validation": ("source", "surrogate", "netlist"),
    "reflection_multiobjective": ("source", "surrogate", "netlist", "ga", "genes"),
    "nonlinear_filter": ("source", "surrogate", "netlist", "reference", "filter", "ga", "genes"),
    "adaptive_sinr": ("source", "surrogate", "netlist", "array", "ga", "genes"),
}

DEFAULTS_DIR = Path(__file__).parent / "defaults"


def default_config_path(name: str) -> Path:
    """Path of a shipped config, e.g. ``default_config_path("validation")``."""
    p = DEFAULTS_DIR / f"{name}.toml"
    if not p.exists():
        known = sorted(q.stem for q in DEFAULTS_DIR.glob("*.toml"))
        raise ConfigError(f"no shipped config {name!r}; known: {known}")
    return p


@dataclass(frozen=True)
class GeneSpec:
    """One named design parameter. ``per_port`` genes expand to ``name_0 .. name_{P-1}``."""

    name: str
    lower: float
    upper: float
    baseline: float | None = None
    kind: str = "continuous"
    scale: str = "linear"
    per_port: bool = False

    def __post_init__(self):
        if self.scale not in ("linear", "log"):
            raise ConfigError(f"gene {self.name}: scale must be 'linear' or 'log'")
        if self.scale == "log" and (self.lower <= 0 or self.kind == "integer"):
            raise ConfigError(f"gene {self.name}: log scale needs positive continuous bounds")
        if not self.lower <= self.upper:
            raise ConfigError(f"gene {self.name}: lower > upper")
        if self.baseline is not None and not self.lower <= self.baseline <= self.upper:
            raise ConfigError(f"gene {self.name}: baseline {self.baseline} outside bounds")

    def encode(self, value: float) -> float:
        return math.log10(value) if self.scale == "log" else float(value)

    def decode(self, g: float) -> float:
        return 10.0 ** g if self.scale == "log" else float(g)

    def gene(self, suffix: str = "") -> Gene:
        return Gene(self.name + suffix, self.encode(self.lower), self.encode(self.upper),
                    kind=self.kind)


class GeneSet:
    """Maps between GA design vectors (encoded genes) and physical parameter values."""

    def __init__(self, specs, n_ports: int):
        self.specs = list(specs)
        self.n_ports = n_ports
        self.slots = []  # (spec, port or None)
        genes = []
        for s in self.specs:
            if s.per_port:
                for p in range(n_ports):
                    self.slots.append((s, p))
                    genes.append(s.gene(f"_{p}"))
            else:
                self.slots.append((s, None))
                genes.append(s.gene())
        self.bounds = DesignVector(genes)

    def baseline(self) -> DesignVector | None:
        if any(s.baseline is None for s in self.specs):
            return None
        return self.bounds.with_values([s.encode(s.baseline) for s, _ in self.slots])

    def physical(self, design: DesignVector) -> dict:
        """``{name: value}`` for shared genes and ``{name: [v_0, ..]}`` for per-port genes."""
        out = {}
        for (s, p), g in zip(self.slots, design.values):
            v = s.decode(g)
            if s.kind == "integer":
                v = int(round(v))
            if p is None:
                out[s.name] = v
            else:
                out.setdefault(s.name, [None] * self.n_ports)[p] = v
        return out

    def for_port(self, design: DesignVector, port: int) -> dict:
        return {k: (v[port] if isinstance(v, list) else v) for k, v in self.physical(design).items()}

    def flat(self, design: DesignVector) -> dict:
        """Physical values keyed by GA gene name, for reports."""
        return {g.name: (int(round(s.decode(v))) if s.kind == "integer" else s.decode(v))
                for (s, _), g, v in zip(self.slots, design.genes, design.values)}


@dataclass
class ScenarioConfig:
    kind: str
    name: str
    path: Path
    n_steps: int
    seed: int
    source: SourceSpec
    surrogate: dict
    netlist: dict
    newton: NewtonConfig
    ga: GAConfig | None
    genes: list
    output_dir: Path
    dt: float
    sections: dict = field(default_factory=dict, repr=False)

    @property
    def base_dir(self) -> Path:
        return self.path.parent

    def section(self, name: str) -> dict:
        return dict(self.sections.get(name, {}))

    def resolve(self, rel) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.base_dir / p

    def with_seed(self, seed: int) -> "ScenarioConfig":
        from dataclasses import replace
        ga = replace(self.ga, seed=seed) if self.ga is not None else None
        return replace(self, seed=seed, ga=ga)


def _float(d, key, where, default=None):
    if key not in d:
        if default is None:
            raise ConfigError(f"[{where}] missing key {key!r}")
        return default
    try:
        return float(d[key])
    except (TypeError, ValueError):
        raise ConfigError(f"[{where}] {key} must be a number, got {d[key]!r}") from None


def _source(d, where="source") -> SourceSpec:
    try:
        return SourceSpec(_float(d, "f0", where), _float(d, "fbw", where),
                          _float(d, "amplitude", where, 1.0), int(d.get("delay_steps", 0)))
    except InvalidArgument as exc:
        raise ConfigError(f"[{where}] {exc}") from None


def _genes(d) -> list:
    out = []
    for name, g in d.items():
        if not isinstance(g, dict):
            raise ConfigError(f"[genes.{name}] must be a table")
        try:
            out.append(GeneSpec(name, _float(g, "lower", f"genes.{name}"),
                                _float(g, "upper", f"genes.{name}"),
                                None if "baseline" not in g else float(g["baseline"]),
                                g.get("kind", "continuous"), g.get("scale", "linear"),
                                bool(g.get("per_port", False))))
        except InvalidArgument as exc:
            raise ConfigError(f"[genes.{name}] {exc}") from None
    return out


def _ga(d, seed) -> GAConfig:
    keys = {"population", "offspring", "generations", "seed", "crossover_prob",
            "mutation_prob", "tournament_size", "sbx_eta"}
    unknown = set(d) - keys
    if unknown:
        raise ConfigError(f"[ga] unknown keys {sorted(unknown)}")
    kw = dict(d)
    kw.setdefault("seed", seed)
    try:
        return GAConfig(**kw)
    except (InvalidArgument, TypeError) as exc:
        raise ConfigError(f"[ga] {exc}") from None


def load_config(path, output_dir=None) -> ScenarioConfig:
    """Read and validate a scenario config; referenced files must exist."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} not found")
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    kind = raw.get("kind")
    if kind not in KINDS:
        raise ConfigError(f"{path}: kind must be one of {KINDS}, got {kind!r}")
    missing = [s for s in REQUIRED[kind] if s not in raw]
    if missing:
        raise ConfigError(f"{path}: kind {kind!r} needs sections {missing}")
    n_steps = int(raw.get("n_steps", 0))
    if n_steps < 2:
        raise ConfigError(f"{path}: n_steps must be >= 2")
    seed = int(raw.get("seed", 0))
    source = _source(raw["source"])
    if "dt" in raw:
        dt = _float(raw, "dt", "top level")
    elif kind == "adaptive_sinr":
        arr = raw["array"]
        dt = default_timestep(_float(arr, "f0", "array"), _float(arr, "fbw", "array"))
    else:
        dt = default_timestep(source.f0, source.fbw)
    if not dt > 0:
        raise ConfigError("dt must be positive")
    nl = dict(raw["netlist"])
    if "template" not in nl:
        raise ConfigError("[netlist] needs a template path")
    try:
        newton = NewtonConfig(**raw.get("newton", {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[newton]: {exc}") from None
    cfg = ScenarioConfig(
        kind=kind,
        name=str(raw.get("name", path.stem)),
        path=path.resolve(),
        n_steps=n_steps,
        seed=seed,
        source=source,
        surrogate=dict(raw["surrogate"]),
        netlist=nl,
        newton=newton,
        ga=_ga(raw["ga"], seed) if "ga" in raw else None,
        genes=_genes(raw.get("genes", {})),
        output_dir=Path(output_dir or raw.get("output_dir", Path("runs") / path.stem)),
        dt=dt,
        sections={k: v for k, v in raw.items() if isinstance(v, dict)},
    )
    for key in ("template",):
        if not cfg.resolve(nl[key]).exists():
            raise ConfigError(f"[netlist] {key} file {cfg.resolve(nl[key])} not found")
    if "reference" in raw:
        ref = raw["reference"].get("template")
        if ref is None or not cfg.resolve(ref).exists():
            raise ConfigError(f"[reference] template {ref!r} not found")
    # build once so bad surrogate/netlist parameters surface at validation time
    sys = build_surrogate(cfg)
    if kind != "validation" and not cfg.genes:
        raise ConfigError(f"kind {kind!r} needs at least one gene")
    if kind == "adaptive_sinr" and int(raw["array"].get("N", sys.n_ports)) != sys.n_ports:
        raise ConfigError("[array] N must equal the surrogate port count")
    return cfg


# -- builders ------------------------------------------------------------------------------

def build_surrogate(cfg: ScenarioConfig) -> SecondOrderLTI:
    s = cfg.surrogate
    kind = s.get("kind", "modal")
    try:
        if kind == "modal":
            modes = [Mode(float(m["freq"]), float(m["zeta"]), float(m["resistance"]),
                          int(m.get("port", 0))) for m in s.get("modes", [])]
            return modal_surrogate(modes, s.get("n_ports"), s.get("coupling"))
        if kind == "grid":
            return grid_surrogate(int(s["nx"]), int(s["ny"]), float(s["fundamental"]),
                                  float(s["zeta"]), float(s["resistance"]),
                                  [tuple(c) for c in s["port_cells"]])
        if kind == "matrices":
            return SecondOrderLTI(*(np.array(s[k], dtype=float) for k in ("M", "D", "K", "B")))
    except KeyError as exc:
        raise ConfigError(f"[surrogate] missing key {exc}") from None
    except InvalidArgument as exc:
        raise ConfigError(f"[surrogate] {exc}") from None
    raise ConfigError(f"[surrogate] unknown kind {kind!r}")


def source_vars(src: SourceSpec) -> dict:
    return {"F0": repr(src.f0), "FBW": repr(src.fbw), "AMP": repr(src.amplitude),
            "DELAY": str(src.delay_steps)}


def render_template(path: Path, values: dict) -> Netlist:
    """Substitute ``${name}`` placeholders and parse the result."""
    text = Path(path).read_text()
    strs = {k: (repr(float(v)) if isinstance(v, float) else str(v)) for k, v in values.items()}
    try:
        body = Template(text).substitute(strs)
    except KeyError as exc:
        raise ConfigError(f"{path}: no value for placeholder {exc}") from None
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return parse_netlist(body)
