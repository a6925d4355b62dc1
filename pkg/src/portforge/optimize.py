"""Genetic algorithm over mixed continuous/integer design vectors.

A (mu + lambda) scheme: binary tournament selection, simulated binary
crossover (SBX) on every gene followed by rounding for integer genes,
uniform-reset mutation, and survival by value (single objective) or by
non-dominated rank and crowding distance (several objectives). Infeasible
candidates rank below every feasible one. Everything is driven by one
seeded ``numpy.random.Generator``, so a run is reproducible bit for bit.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import InvalidArgument, OptimizationError, PortforgeError


@dataclass(frozen=True)
class Gene:
    name: str
    lower: float
    upper: float
    value: float | None = None
    kind: str = "continuous"

    def __post_init__(self):
        if self.kind not in ("continuous", "integer"):
            raise InvalidArgument(f"{self.name}: unknown gene kind {self.kind!r}")
        if not self.lower <= self.upper:
            raise InvalidArgument(f"{self.name}: lower bound exceeds upper bound")
        if self.kind == "integer" and (self.lower != int(self.lower) or self.upper != int(self.upper)):
            raise InvalidArgument(f"{self.name}: integer gene needs integral bounds")
        if self.value is not None:
            if not self.lower <= self.value <= self.upper:
                raise InvalidArgument(f"{self.name}: value {self.value} outside bounds")
            if self.kind == "integer" and self.value != int(self.value):
                raise InvalidArgument(f"{self.name}: integer gene holds {self.value}")


@dataclass(frozen=True)
class DesignVector:
    genes: tuple

    def __post_init__(self):
        object.__setattr__(self, "genes", tuple(self.genes))
        names = [g.name for g in self.genes]
        if len(set(names)) != len(names):
            raise InvalidArgument("gene names must be unique")

    def __len__(self):
        return len(self.genes)

    @property
    def names(self) -> list:
        return [g.name for g in self.genes]

    @property
    def values(self) -> np.ndarray:
        return np.array([np.nan if g.value is None else g.value for g in self.genes])

    @property
    def lower(self) -> np.ndarray:
        return np.array([g.lower for g in self.genes], dtype=float)

    @property
    def upper(self) -> np.ndarray:
        return np.array([g.upper for g in self.genes], dtype=float)

    @property
    def integer_mask(self) -> np.ndarray:
        return np.array([g.kind == "integer" for g in self.genes])

    def with_values(self, values) -> "DesignVector":
        values = np.asarray(values, dtype=float)
        return DesignVector(replace(g, value=float(v)) for g, v in zip(self.genes, values))

    def as_dict(self) -> dict:
        return {g.name: (int(g.value) if g.kind == "integer" else g.value) for g in self.genes}

    def key(self) -> tuple:
        return tuple(float(g.value) for g in self.genes)


@dataclass(frozen=True)
class GAConfig:
    population: int = 60
    offspring: int = 60
    generations: int = 50
    seed: int = 0
    crossover_prob: float = 0.9
    mutation_prob: float | None = None
    tournament_size: int = 2
    sbx_eta: float = 2.0

    def __post_init__(self):
        if self.population < 2:
            raise InvalidArgument("population must be >= 2")
        if self.offspring < 1:
            raise InvalidArgument("offspring must be >= 1")
        if self.generations < 1:
            raise InvalidArgument("generations must be >= 1")
        if not 0 <= self.crossover_prob <= 1:
            raise InvalidArgument("crossover_prob must lie in [0, 1]")
        if self.mutation_prob is not None and not 0 <= self.mutation_prob <= 1:
            raise InvalidArgument("mutation_prob must lie in [0, 1]")
        if self.tournament_size < 1:
            raise InvalidArgument("tournament_size must be >= 1")


@dataclass
class EvaluatedIndividual:
    design: DesignVector
    objectives: tuple
    feasible: bool = True

    def __post_init__(self):
        self.objectives = tuple(float(v) for v in self.objectives)
        if self.feasible and not all(math.isfinite(v) for v in self.objectives):
            raise InvalidArgument("feasible individual with non-finite objectives")


@dataclass
class GenerationStats:
    generation: int
    best: float
    mean: float
    feasible_count: int


@dataclass
class GAResult:
    best: list
    history: list
    population: list = field(repr=False, default_factory=list)
    evaluations: int = 0

    @property
    def best_history(self) -> list:
        return [h.best for h in self.history]


def target_cost(f_value, d):
    """``|d - f|``; element-wise for vector responses."""
    out = np.abs(np.asarray(d, dtype=float) - np.asarray(f_value, dtype=float))
    return float(out) if out.ndim == 0 else out


# -- Pareto machinery ------------------------------------------------------------------

def _dominates(a, b) -> bool:
    return all(x <= y for x, y in zip(a, b)) and any(x < y for x, y in zip(a, b))


def crowding_distance(objs: np.ndarray) -> np.ndarray:
    n, m = objs.shape
    dist = np.zeros(n)
    if n <= 2:
        dist[:] = np.inf
        return dist
    for k in range(m):
        order = np.argsort(objs[:, k], kind="stable")
        lo, hi = objs[order[0], k], objs[order[-1], k]
        dist[order[0]] = dist[order[-1]] = np.inf
        if hi == lo:
            continue
        dist[order[1:-1]] += (objs[order[2:], k] - objs[order[:-2], k]) / (hi - lo)
    return dist


def _front_indices(objs: np.ndarray) -> list:
    n = objs.shape[0]
    dominated_by = [[] for _ in range(n)]
    count = np.zeros(n, dtype=int)
    for i in range(n):
        for j in range(i + 1, n):
            if _dominates(objs[i], objs[j]):
                dominated_by[i].append(j)
                count[j] += 1
            elif _dominates(objs[j], objs[i]):
                dominated_by[j].append(i)
                count[i] += 1
    fronts = []
    current = [i for i in range(n) if count[i] == 0]
    while current:
        dist = crowding_distance(objs[current])
        order = sorted(range(len(current)), key=lambda k: (-dist[k], k))
        fronts.append([current[k] for k in order])
        nxt = []
        for i in current:
            for j in dominated_by[i]:
                count[j] -= 1
                if count[j] == 0:
                    nxt.append(j)
        current = sorted(nxt)
    return fronts


def nondominated_sort(pop: Sequence[EvaluatedIndividual]) -> list:
    """Pareto fronts (lists of individuals), each ordered by decreasing crowding distance."""
    if not pop:
        return []
    arity = {len(p.objectives) for p in pop}
    if len(arity) != 1:
        raise InvalidArgument(f"inconsistent objective counts {sorted(arity)}")
    objs = np.array([p.objectives for p in pop], dtype=float)
    return [[pop[i] for i in front] for front in _front_indices(objs)]


def select_min_sum(front: Sequence[EvaluatedIndividual]) -> EvaluatedIndividual:
    """Member with the smallest objective sum; ties go to the smallest first objective."""
    if not front:
        raise InvalidArgument("cannot select from an empty front")
    order = sorted(range(len(front)), key=lambda k: front[k].objectives[0])
    best = order[0]
    for k in order:
        if sum(front[k].objectives) < sum(front[best].objectives):
            best = k
    return front[best]


# -- variation -------------------------------------------------------------------------

def _sbx(rng, p1, p2, lo, hi, eta):
    c1, c2 = p1.copy(), p2.copy()
    for k in range(p1.size):
        if rng.random() > 0.5 or abs(p1[k] - p2[k]) <= 1e-14 or hi[k] == lo[k]:
            continue
        y1, y2 = min(p1[k], p2[k]), max(p1[k], p2[k])
        u = rng.random()
        out = []
        for beta in (1 + 2 * (y1 - lo[k]) / (y2 - y1), 1 + 2 * (hi[k] - y2) / (y2 - y1)):
            alpha = 2 - beta ** -(eta + 1)
            if u <= 1 / alpha:
                betaq = (u * alpha) ** (1 / (eta + 1))
            else:
                betaq = (1 / (2 - u * alpha)) ** (1 / (eta + 1))
            out.append(betaq)
        a = 0.5 * ((y1 + y2) - out[0] * (y2 - y1))
        b = 0.5 * ((y1 + y2) + out[1] * (y2 - y1))
        a, b = min(max(a, lo[k]), hi[k]), min(max(b, lo[k]), hi[k])
        if rng.random() < 0.5:
            a, b = b, a
        c1[k], c2[k] = a, b
    return c1, c2


def _random_values(rng, lo, hi, is_int):
    v = lo + rng.random(lo.size) * (hi - lo)
    ints = rng.integers(lo.astype(np.int64), hi.astype(np.int64) + 1) if is_int.any() else None
    if ints is not None:
        v = np.where(is_int, ints, v)
    return v


def _repair(v, lo, hi, is_int):
    v = np.clip(v, lo, hi)
    return np.where(is_int, np.clip(np.round(v), lo, hi), v)


# -- main loop ---------------------------------------------------------------------------

def _evaluate_all(designs, evaluate, evaluate_batch, threads):
    if evaluate_batch is not None:
        raw = list(evaluate_batch(designs))
    elif threads > 1 and len(designs) > 1:
        with ThreadPoolExecutor(threads) as pool:
            raw = list(pool.map(lambda d: _safe(evaluate, d), designs))
        return [_to_individual(d, r) for d, r in zip(designs, raw)]
    else:
        raw = [_safe(evaluate, d) for d in designs]
    return [_to_individual(d, r) for d, r in zip(designs, raw)]


def _safe(evaluate, design):
    try:
        return evaluate(design)
    except PortforgeError:
        return None


def _to_individual(design, raw):
    if raw is None:
        return EvaluatedIndividual(design, (math.inf,), False)
    objs = tuple(float(v) for v in np.atleast_1d(raw))
    feasible = all(math.isfinite(v) for v in objs)
    if not feasible:
        objs = tuple(math.inf for _ in objs)
    return EvaluatedIndividual(design, objs, feasible)


def _ranking(pop, n_obj):
    """Rank keys (lower is better) for survival and tournaments."""
    feas = [i for i, p in enumerate(pop) if p.feasible]
    infeas = [i for i, p in enumerate(pop) if not p.feasible]
    keys = {}
    if n_obj == 1:
        order = sorted(feas, key=lambda i: (pop[i].objectives[0], i))
        for r, i in enumerate(order):
            keys[i] = (0, r, 0.0)
    else:
        objs = np.array([pop[i].objectives for i in feas], dtype=float).reshape(len(feas), n_obj)
        fronts = _front_indices(objs) if feas else []
        for r, front in enumerate(fronts):
            for pos, k in enumerate(front):
                keys[feas[k]] = (0, r, pos)
        if fronts:
            # the min-sum member is always non-dominated; pinning it keeps the
            # best objective sum monotone across generations
            sums = objs[fronts[0]].sum(axis=1)
            keys[feas[fronts[0][int(np.argmin(sums))]]] = (0, 0, -1)
    for i in infeas:
        keys[i] = (1, 0, i)
    return keys


def _fix_arity(pop, n_obj):
    for p in pop:
        if not p.feasible and len(p.objectives) != n_obj:
            p.objectives = tuple(math.inf for _ in range(n_obj))


def _stats(gen, pop, n_obj):
    feas = [p for p in pop if p.feasible]
    if not feas:
        return GenerationStats(gen, math.inf, math.inf, 0)
    vals = [p.objectives[0] if n_obj == 1 else sum(p.objectives) for p in feas]
    return GenerationStats(gen, min(vals), float(np.mean(vals)), len(feas))


def ga_minimize(cfg: GAConfig, bounds: DesignVector,
                evaluate: Optional[Callable] = None,
                evaluate_batch: Optional[Callable] = None,
                seeds: Sequence[DesignVector] = (),
                threads: int = 1) -> GAResult:
    """Minimise ``evaluate(design) -> objective(s)`` over the box given by ``bounds``.

    ``evaluate`` may return ``None`` or raise a package error to mark a
    candidate infeasible. ``evaluate_batch`` (list of designs -> list of
    results) replaces per-design calls when the caller can vectorise.
    ``seeds`` are injected into the initial population ahead of random
    designs. Single-objective runs return the single best individual;
    multi-objective runs return the final first front.
    """
    if evaluate is None and evaluate_batch is None:
        raise InvalidArgument("need evaluate or evaluate_batch")
    rng = np.random.default_rng(cfg.seed)
    lo, hi, is_int = bounds.lower, bounds.upper, bounds.integer_mask
    n_genes = len(bounds)
    # a reset on every child would turn one-gene problems into random search
    p_mut = cfg.mutation_prob if cfg.mutation_prob is not None else min(1.0 / max(n_genes, 1), 0.5)

    designs = []
    for s in list(seeds)[: cfg.population]:
        v = s.values if isinstance(s, DesignVector) else np.asarray(s, dtype=float)
        designs.append(bounds.with_values(_repair(v, lo, hi, is_int)))
    while len(designs) < cfg.population:
        designs.append(bounds.with_values(_repair(_random_values(rng, lo, hi, is_int), lo, hi, is_int)))

    pop = _evaluate_all(designs, evaluate, evaluate_batch, threads)
    n_evals = len(pop)
    n_obj = max(len(p.objectives) for p in pop)
    _fix_arity(pop, n_obj)
    if not any(p.feasible for p in pop):
        raise OptimizationError("every candidate of the initial population is infeasible")
    history = [_stats(0, pop, n_obj)]

    for gen in range(1, cfg.generations + 1):
        keys = _ranking(pop, n_obj)

        def tournament():
            picks = rng.integers(0, len(pop), cfg.tournament_size)
            return min(picks, key=lambda i: (keys[int(i)], int(i)))

        children = []
        while len(children) < cfg.offspring:
            a, b = tournament(), tournament()
            va, vb = pop[a].design.values, pop[b].design.values
            if rng.random() < cfg.crossover_prob:
                ca, cb = _sbx(rng, va, vb, lo, hi, cfg.sbx_eta)
            else:
                ca, cb = va.copy(), vb.copy()
            for c in (ca, cb):
                mask = rng.random(n_genes) < p_mut
                if mask.any():
                    c[mask] = _random_values(rng, lo, hi, is_int)[mask]
                children.append(bounds.with_values(_repair(c, lo, hi, is_int)))
        children = children[: cfg.offspring]
        evaluated = _evaluate_all(children, evaluate, evaluate_batch, threads)
        n_evals += len(evaluated)
        _fix_arity(evaluated, n_obj)
        if not any(p.feasible for p in evaluated) and not any(p.feasible for p in pop):
            raise OptimizationError(f"generation {gen}: every candidate is infeasible")
        merged = pop + evaluated
        keys = _ranking(merged, n_obj)
        order = sorted(range(len(merged)), key=lambda i: (keys[i], i))
        # duplicates only fill leftover slots; otherwise the population collapses
        seen, unique, dupes = set(), [], []
        for i in order:
            k = merged[i].design.key()
            (dupes if k in seen else unique).append(i)
            seen.add(k)
        pop = [merged[i] for i in (unique + dupes)[: cfg.population]]
        history.append(_stats(gen, pop, n_obj))

    keys = _ranking(pop, n_obj)
    if n_obj == 1:
        best = [min((p for p in pop if p.feasible), key=lambda p: p.objectives[0])]
    else:
        best = [pop[i] for i in sorted(keys, key=lambda i: keys[i]) if keys[i][:2] == (0, 0)]
    return GAResult(best, history, pop, n_evals)


def write_history_csv(history, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["generation", "best", "mean", "feasible_count"])
        for h in history:
            w.writerow([h.generation, repr(h.best), repr(h.mean), h.feasible_count])
    return path


def read_history_csv(path) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [GenerationStats(int(r["generation"]), float(r["best"]), float(r["mean"]),
                            int(r["feasible_count"])) for r in rows]
