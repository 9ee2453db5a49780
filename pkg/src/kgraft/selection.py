"""Constrained subset search over donor taps: exhaustive, greedy and genetic.

An evaluator maps a :class:`SelectionVector` of length m to
``(size_bytes, perf)``. It may also expose ``size(s)``; size-constrained
searches then skip training for candidates already over budget.

Orderings (smaller key is better, infeasible always last):

* size-constrained max-perf: ``(-perf, size, bits)``
* perf-constrained min-size: ``(size, -perf, bits)``
"""

import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import DivergenceError, UsageError, ValidationError
from .grafting import GraftHead, SelectionVector, scion_from_selection
from .metrics import BYTES_PER_PARAM, MIB, round_half_up
from .models import prefix_parameter_count
from .rng import make_rng
from .training import TrainConfig, train_model

MAX_PERF = "size_constrained_max_perf"
MIN_SIZE = "perf_constrained_min_size"
MODES = (MAX_PERF, MIN_SIZE)
EXHAUSTIVE_LIMIT = 16


@dataclass(frozen=True)
class ObjectiveSpec:
    mode: str
    size_max: int = None
    perf_min: float = None
    perf_metric: str = "val_accuracy"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValidationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == MAX_PERF:
            if self.size_max is None or self.perf_min is not None:
                raise ValidationError("size-constrained mode takes size_max and no perf_min")
            if self.size_max < 0:
                raise ValidationError("size_max must be >= 0 bytes")
        else:
            if self.perf_min is None or self.size_max is not None:
                raise ValidationError("perf-constrained mode takes perf_min and no size_max")
            if not 0 <= self.perf_min <= 1:
                raise ValidationError("perf_min must lie in [0, 1]")
        if self.perf_metric not in ("val_accuracy", "neg_val_loss"):
            raise ValidationError("perf_metric must be val_accuracy or neg_val_loss")

    def feasible(self, size_bytes, perf):
        if self.mode == MAX_PERF:
            return size_bytes <= self.size_max
        return perf >= self.perf_min

    def key(self, rec):
        bits = str(rec.selection)
        if not rec.feasible:
            return (1, 0.0, 0, bits)
        if self.mode == MAX_PERF:
            return (0, -rec.perf, rec.size_bytes, bits)
        return (0, rec.size_bytes, -rec.perf, bits)

    def to_dict(self):
        return {"mode": self.mode, "size_max": self.size_max, "perf_min": self.perf_min,
                "perf_metric": self.perf_metric}


@dataclass
class CandidateRecord:
    selection: SelectionVector
    size_bytes: int
    perf: float
    feasible: bool
    eval_cost: float = 0.0
    diagnostic: str = None
    trained: bool = True

    def to_dict(self):
        return {
            "selection": str(self.selection),
            "size_bytes": int(self.size_bytes),
            "size_mb": float(round_half_up(self.size_bytes / MIB, 4)),
            "perf": float(f"{self.perf:.6f}"),
            "feasible": self.feasible,
            "trained": self.trained,
            "diagnostic": self.diagnostic,
        }


@dataclass
class SearchReport:
    objective: ObjectiveSpec
    strategy: str
    m: int
    seed: int
    candidates: list
    best: CandidateRecord = None
    history: list = field(default_factory=list)

    @property
    def evaluations(self):
        return len(self.candidates)

    @property
    def infeasible(self):
        return self.best is None

    def to_dict(self):
        return {
            "strategy": self.strategy,
            "seed": self.seed,
            "m": self.m,
            "objective": self.objective.to_dict(),
            "evaluations": self.evaluations,
            "trained": sum(c.trained for c in self.candidates),
            "infeasible": self.infeasible,
            "best": None if self.best is None else self.best.to_dict(),
            "history": self.history,
            "candidates": [c.to_dict() for c in self.candidates],
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def cost_lines(self):
        """Per-candidate wall time; kept out of the JSON so reports stay byte-stable."""
        return [f"{c.selection} {c.eval_cost:.4f}s" for c in self.candidates]


class _Memo:
    """Evaluates each distinct selection once and keeps the records."""

    def __init__(self, objective, evaluator, m):
        self.objective, self.evaluator, self.m = objective, evaluator, m
        self.records = {}

    def __call__(self, s):
        if len(s) != self.m:
            raise ValidationError(f"selection has {len(s)} bits, expected {self.m}")
        rec = self.records.get(s.bits)
        if rec is None:
            rec = self.records[s.bits] = evaluate_candidate(s, self.evaluator, self.objective)
        return rec

    def report(self, strategy, seed, history=None):
        cands = sorted(self.records.values(), key=lambda r: str(r.selection))
        feasible = [r for r in cands if r.feasible]
        best = min(feasible, key=self.objective.key) if feasible else None
        return SearchReport(self.objective, strategy, self.m, seed, cands, best, history or [])


def evaluate_candidate(s, evaluator, objective):
    """Score one selection. Empty scions and diverged runs come back infeasible."""
    t0 = time.perf_counter()
    if not any(s.bits):
        return CandidateRecord(s, 0, 0.0, False, 0.0, "empty scion", trained=False)
    sizer = getattr(evaluator, "size", None)
    if objective.mode == MAX_PERF and sizer is not None:
        size = int(sizer(s))
        if size > objective.size_max:
            return CandidateRecord(s, size, 0.0, False, time.perf_counter() - t0,
                                   "over size budget; not trained", trained=False)
    try:
        size, perf = evaluator(s)
    except DivergenceError as exc:
        size = int(sizer(s)) if sizer is not None else 0
        return CandidateRecord(s, size, 0.0, False, time.perf_counter() - t0, f"diverged: {exc}")
    size, perf = int(size), float(perf)
    return CandidateRecord(s, size, perf, objective.feasible(size, perf), time.perf_counter() - t0)


def _canonical(m):
    """Nonempty selections ordered by integer value, bit 0 most significant."""
    for v in range(1, 2 ** m):
        yield SelectionVector(tuple((v >> (m - 1 - i)) & 1 for i in range(m)))


def exhaustive_search(objective, m, evaluator):
    if m > EXHAUSTIVE_LIMIT:
        raise UsageError(f"exhaustive search over m={m} taps is 2^{m} candidates; the limit is "
                         f"m <= {EXHAUSTIVE_LIMIT}. Use the greedy or genetic strategy.")
    if m < 1:
        raise UsageError("need at least one candidate tap")
    memo = _Memo(objective, evaluator, m)
    for s in _canonical(m):
        memo(s)
    return memo.report("exhaustive", None)


def greedy_search(objective, m, evaluator):
    """Forward selection from the empty set.

    Size-constrained: add the feasible index with the highest perf while it
    strictly improves perf. Perf-constrained: add the index with the highest
    perf until the constraint holds or perf stops improving. Ties go to the
    lowest index.
    """
    if m < 1:
        raise UsageError("need at least one candidate tap")
    memo = _Memo(objective, evaluator, m)
    chosen, current, history = set(), -math.inf, []
    while len(chosen) < m:
        best_i, best_rec = None, None
        for i in range(m):
            if i in chosen:
                continue
            rec = memo(SelectionVector.from_indices(chosen | {i}, m))
            if objective.mode == MAX_PERF and not rec.feasible:
                continue
            if rec.trained and (best_rec is None or rec.perf > best_rec.perf):
                best_i, best_rec = i, rec
        if best_rec is None or best_rec.perf <= current:
            break
        chosen.add(best_i)
        current = best_rec.perf
        history.append({"added": best_i, "selection": str(best_rec.selection),
                        "perf": float(f"{current:.6f}")})
        if objective.mode == MIN_SIZE and best_rec.feasible:
            break
    return memo.report("greedy", None, history)


@dataclass(frozen=True)
class GeneticConfig:
    population: int = 20
    generations: int = 30
    crossover_rate: float = 0.9
    mutation_rate: float = None  # None -> 1/m
    elitism: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.population < 2:
            raise ValidationError("population must be >= 2")
        if self.generations < 0:
            raise ValidationError("generations must be >= 0")
        if not 0 <= self.crossover_rate <= 1:
            raise ValidationError("crossover_rate must lie in [0, 1]")
        if self.mutation_rate is not None and not 0 <= self.mutation_rate <= 1:
            raise ValidationError("mutation_rate must lie in [0, 1]")
        if not 0 <= self.elitism <= self.population:
            raise ValidationError("elitism must lie in [0, population]")


def genetic_search(objective, m, evaluator, ga=GeneticConfig(), initial_population=None,
                   on_generation=None):
    """Bitstring GA: tournament(2) selection, uniform crossover, per-bit mutation.

    The ``elitism`` best individuals pass unchanged to the next generation.
    Returns the best feasible individual ever evaluated. ``on_generation`` is
    called with (generation, population array) before each breeding step.
    """
    if m < 1:
        raise UsageError("need at least one candidate tap")
    rng = make_rng(ga.seed, "genetic")
    mut = 1.0 / m if ga.mutation_rate is None else ga.mutation_rate
    memo = _Memo(objective, evaluator, m)
    if initial_population is None:
        pop = (rng.random((ga.population, m)) < 0.5).astype(np.int8)
    else:
        pop = np.asarray(initial_population, dtype=np.int8)
        if pop.shape != (ga.population, m) or not np.isin(pop, (0, 1)).all():
            raise ValidationError(f"initial population must be a ({ga.population}, {m}) 0/1 array")
    history = []
    best_ever = None
    for gen in range(ga.generations + 1):
        recs = [memo(SelectionVector(tuple(row))) for row in pop]
        keys = [objective.key(r) for r in recs]
        rank = sorted(range(len(recs)), key=lambda j: keys[j])
        gen_best = recs[rank[0]]
        if best_ever is None or keys[rank[0]] < objective.key(best_ever):
            best_ever = gen_best
        history.append({"generation": gen,
                        "generation_best": _summary(gen_best),
                        "best_ever": _summary(best_ever)})
        if on_generation is not None:
            on_generation(gen, pop.copy())
        if gen == ga.generations:
            break
        nxt = [pop[j].copy() for j in rank[:ga.elitism]]
        while len(nxt) < ga.population:
            a = _tournament(rng, keys)
            b = _tournament(rng, keys)
            if rng.random() < ga.crossover_rate:
                mask = rng.random(m) < 0.5
                child = np.where(mask, pop[a], pop[b]).astype(np.int8)
            else:
                child = pop[a].copy()
            flips = rng.random(m) < mut
            child[flips] ^= 1
            nxt.append(child)
        pop = np.stack(nxt)
    return memo.report("genetic", ga.seed, history)


def _tournament(rng, keys):
    i, j = rng.integers(0, len(keys), size=2)
    return int(i) if keys[i] <= keys[j] else int(j)


def _summary(rec):
    return {"selection": str(rec.selection), "feasible": rec.feasible,
            "size_bytes": int(rec.size_bytes), "perf": float(f"{rec.perf:.6f}")}


# -- graft evaluator --------------------------------------------------------------

class GraftEvaluator:
    """Trains a fresh head on pooled donor features for each candidate.

    ``bank`` maps each donor tap index in ``taps`` to its pooled feature rows
    for all samples; ``train``/``val`` are (row indices, one-hot targets).
    Bit j of a selection refers to donor layer ``taps[j]``.
    """

    def __init__(self, donor_spec, taps, bank, train, val, head, epochs=6, seed=0,
                 perf_metric="val_accuracy"):
        self.donor_spec = donor_spec
        self.taps = tuple(sorted(taps))
        if list(self.taps) != list(taps) or len(set(self.taps)) != len(self.taps):
            raise ValidationError("candidate taps must be strictly increasing")
        self.bank, self.train, self.val = bank, train, val
        self.head, self.epochs, self.seed = head, epochs, seed
        self.perf_metric = perf_metric

    @property
    def m(self):
        return len(self.taps)

    def donor_selection(self, s):
        """Lift a candidate-level selection to a donor-level SelectionVector."""
        chosen = [self.taps[j] for j in scion_from_selection(s)]
        return SelectionVector.from_indices(chosen, len(self.donor_spec.layers))

    def width(self, s):
        return sum(self.bank[self.taps[j]].shape[1] for j in scion_from_selection(s))

    def parameter_count(self, s):
        deepest = self.taps[scion_from_selection(s)[-1]]
        return self.head.parameter_count(self.width(s)) + prefix_parameter_count(self.donor_spec, deepest)

    def size(self, s):
        return self.parameter_count(s) * BYTES_PER_PARAM

    def features(self, s, rows):
        return np.concatenate([self.bank[self.taps[j]][rows] for j in scion_from_selection(s)], axis=1)

    def __call__(self, s):
        head = GraftHead(self.head, self.width(s))
        params = head.init_params(make_rng(self.seed, "candidate", str(s)))
        (tr, ytr), (va, yva) = self.train, self.val
        _, hist = train_model(head, params, (self.features(s, tr), ytr), (self.features(s, va), yva),
                              TrainConfig(epochs=self.epochs, seed=self.seed))
        last = hist[-1]
        perf = last.val_acc if self.perf_metric == "val_accuracy" else -last.val_loss
        return self.size(s), perf


STRATEGIES = ("exhaustive", "greedy", "genetic")


def run_search(strategy, objective, m, evaluator, ga=None):
    if strategy == "exhaustive":
        return exhaustive_search(objective, m, evaluator)
    if strategy == "greedy":
        return greedy_search(objective, m, evaluator)
    if strategy == "genetic":
        return genetic_search(objective, m, evaluator, ga or GeneticConfig())
    raise UsageError(f"strategy must be one of {STRATEGIES}, got {strategy!r}")
