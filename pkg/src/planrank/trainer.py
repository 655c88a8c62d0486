"""Runtime stats repository, pre-training, and the online train/select loop."""
from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .comparator import (
    SGD,
    Bounds,
    ComparatorModel,
    FeatureTree,
    PlanPairExample,
    featurize,
    gradients,
    regression_gradients,
    select_best_index,
)
from .engine import Database
from .explorer import CandidateList, explore, random_plan
from .optimizer import CostModel, NativeEstimator, Statistics, enumerate_best_plan
from .plan import PlanTree
from .schema import Catalog, Query, SubQuery
from .workload import random_query


# -- runtime stats repository -------------------------------------------------

@dataclass(frozen=True)
class RuntimeStatsRecord:
    query_id: str
    plan: str
    provenance: str
    latency: float
    sequence: int


class RuntimeStatsRepository:
    """Append-only log of executed plans; optionally backed by a JSON-lines file."""

    def __init__(self, path=None):
        self.path = Path(path) if path is not None else None
        self._records: list[RuntimeStatsRecord] = []
        self._keys: set = set()
        self._pending: list[str] = []
        if self.path is not None and self.path.exists():
            for line in self.path.read_text().splitlines():
                if line.strip():
                    self._insert(RuntimeStatsRecord(**json.loads(line)))

    def _insert(self, rec: RuntimeStatsRecord) -> bool:
        key = (rec.query_id, rec.plan)
        if key in self._keys:
            return False
        self._keys.add(key)
        self._records.append(rec)
        return True

    def append(self, rec: RuntimeStatsRecord) -> bool:
        added = self._insert(rec)
        if added and self.path is not None:
            self._pending.append(json.dumps(asdict(rec), sort_keys=True))
        return added

    def flush(self) -> None:
        if self.path is None or not self._pending:
            return
        with open(self.path, "a") as fh:
            fh.write("\n".join(self._pending) + "\n")
            fh.flush()
            os.fsync(fh.fileno())
        self._pending.clear()

    def records(self, max_sequence: Optional[int] = None) -> list[RuntimeStatsRecord]:
        recs = sorted(self._records, key=lambda r: r.sequence)
        if max_sequence is None:
            return recs
        return [r for r in recs if r.sequence <= max_sequence]

    def for_query(self, query_id: str) -> list[RuntimeStatsRecord]:
        return [r for r in self.records() if r.query_id == query_id]

    def __len__(self):
        return len(self._records)


def record_execution(repo: RuntimeStatsRepository, query: Query, plan: PlanTree, latency: float,
                     sequence: int, provenance: str = "") -> bool:
    return repo.append(RuntimeStatsRecord(query.id, plan.signature(), provenance, float(latency), sequence))


def build_pairs(records: Sequence[RuntimeStatsRecord], trees: Sequence[FeatureTree]) -> list[PlanPairExample]:
    """All ordered pairs of one query's executed plans.

    ``trees[i]`` is the featurized plan of ``records[i]``. Tied latencies
    yield the pair with both labels.
    """
    out = []
    n = len(records)
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            li, lj = records[i].latency, records[j].latency
            if li == lj:
                out.append(PlanPairExample(trees[i], trees[j], 0))
                out.append(PlanPairExample(trees[i], trees[j], 1))
            else:
                out.append(PlanPairExample(trees[i], trees[j], int(li > lj)))
    return out


# -- pre-training ---------------------------------------------------------------

class RandomCardinalities:
    """Random per-sub-plan cardinalities for synthetic pre-training plans."""

    def __init__(self, catalog: Catalog, rng: np.random.Generator, max_rows: float = 1e9):
        self.catalog = catalog
        self.rng = rng
        self.max_rows = max_rows
        self._memo: dict = {}

    def estimate(self, sub: SubQuery) -> float:
        if sub.tables not in self._memo:
            if sub.size == 1:
                (t,) = sub.tables
                hi = max(self.catalog.table(t).row_count, 1)
            else:
                hi = self.max_rows
            self._memo[sub.tables] = float(np.exp(self.rng.uniform(0.0, math.log(hi))))
        return self._memo[sub.tables]

    def table_rows(self, table):
        return float(self.catalog.table(table).row_count)

    def row_width(self, table):
        return float(self.catalog.table(table).row_width)


@dataclass
class PretrainConfig:
    n_plans: int = 2000
    steps: int = 3000
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    max_tables: int = 5


def synthetic_plans(catalog: Catalog, n: int, rng: np.random.Generator, cost_model: CostModel,
                    max_tables: int = 5):
    """Random plans over random join graphs, with random cardinalities and their native costs."""
    plans, costs = [], []
    for i in range(n):
        q = random_query(catalog, rng, 1, max_tables, qid=f"pre{i}")
        cards = RandomCardinalities(catalog, rng)
        p = random_plan(q, rng, cards)
        plans.append(p)
        costs.append(cost_model.plan_cost(p, cards))
    return plans, np.array(costs)


def pretrain(model: ComparatorModel, catalog: Catalog, cost_model: CostModel,
             n_plans: int, seed: int, config: Optional[PretrainConfig] = None) -> ComparatorModel:
    """Regress the scalar embedding onto min-max normalized log native cost.

    Nothing is executed. Normalization bounds are frozen from the synthetic
    corpus and stored on the model.
    """
    if model.dim != 1:
        raise ValueError("pre-training is defined only for one-dimensional embeddings")
    if n_plans <= 0:
        return model
    config = config or PretrainConfig()
    rng = np.random.default_rng(seed)
    plans, costs = synthetic_plans(catalog, n_plans, rng, cost_model, config.max_tables)
    model.bounds = Bounds.fit(
        [n.est_rows for p in plans for n in p.nodes()],
        [n.row_width for p in plans for n in p.nodes()],
    )
    model.table_order = tuple(catalog.table_names)
    trees = [featurize(p, None, model.bounds, model.table_order) for p in plans]
    logc = np.log(np.maximum(costs, 1.0))
    lo, hi = logc.min(), logc.max()
    targets = (logc - lo) / (hi - lo) if hi > lo else np.zeros_like(logc)
    opt = SGD(config.lr, config.momentum)
    order = np.array([], dtype=np.int64)
    pos = 0
    for _ in range(config.steps):
        if pos + config.batch_size > len(order):
            order = rng.permutation(len(trees))
            pos = 0
        idx = order[pos:pos + config.batch_size]
        pos += config.batch_size
        _, grads = regression_gradients([trees[i] for i in idx], targets[idx], model)
        opt.step(model, grads)
    return model


# -- online loop -----------------------------------------------------------------

@dataclass
class TrainingSchedule:
    update_every: int = 100
    idle_fraction: float = 1.0
    steps_per_update: int = 500
    batch_size: int = 64
    lr: float = 1e-3
    momentum: float = 0.0
    seed: int = 0
    idle_mode: str = "hash"  # or "prefix"

    def __post_init__(self):
        if self.update_every < 1:
            raise ValueError("update_every must be at least 1")
        if not 0.0 < self.idle_fraction <= 1.0:
            raise ValueError("idle_fraction must lie in (0, 1]")


def idle_hash(query_id: str, seed: int) -> float:
    digest = hashlib.sha256(f"{seed}:{query_id}".encode()).digest()
    return int.from_bytes(digest[:8], "big") / 2.0 ** 64


def is_idle(schedule: TrainingSchedule, query_id: str, position: int, total: int) -> bool:
    if schedule.idle_mode == "prefix":
        return position < schedule.idle_fraction * total
    return idle_hash(query_id, schedule.seed) < schedule.idle_fraction


@dataclass
class ExplorerConfig:
    strategy: str = "heuristic"
    alpha: float = 10.0
    delta: float = 100.0
    max_candidates: int = 50
    random_n: Optional[int] = None
    seed: int = 0


@dataclass
class QueryOutcome:
    sequence: int
    query_id: str
    template: int
    chosen: int
    decision_latency: float
    native_latency: float
    candidate_latencies: list
    idle: bool
    model_version: int
    chosen_provenance: str
    fallback: bool = False

    @property
    def fastest_latency(self) -> float:
        return min(self.candidate_latencies)

    def rank(self) -> int:
        """1 + number of candidates strictly faster than the chosen plan."""
        return 1 + sum(1 for x in self.candidate_latencies if x < self.decision_latency)


@dataclass
class LoopState:
    """Mutable pieces the loop shares with its caller."""

    model: ComparatorModel
    repo: RuntimeStatsRepository = field(default_factory=RuntimeStatsRepository)
    version: int = 0
    trained_max_sequence: list = field(default_factory=list)
    optimizer: Optional[SGD] = None


def run_online_loop(
    queries: Sequence[Query],
    db: Database,
    stats: Statistics,
    state: LoopState,
    schedule: TrainingSchedule,
    explorer: Optional[ExplorerConfig] = None,
    cost_model: Optional[CostModel] = None,
    *,
    freeze_after: Optional[int] = None,
    before_query: Optional[Callable[[int], None]] = None,
    candidate_cache: Optional[dict] = None,
) -> list[QueryOutcome]:
    """Select, execute, record and periodically retrain, one query at a time.

    The model that selects for query ``t`` was published after training on
    records with sequence numbers below ``t`` only.
    """
    explorer = explorer or ExplorerConfig()
    cost_model = cost_model or CostModel()
    if state.optimizer is None:
        state.optimizer = SGD(schedule.lr, schedule.momentum)
    published = state.model
    features: dict = {}
    outcomes = []
    total = len(queries)
    for t, query in enumerate(queries):
        if before_query is not None:
            before_query(t)
        est = NativeEstimator(stats)
        cands, fallback = _candidates(query, est, explorer, cost_model, stats, candidate_cache, t)
        trees = [featurize(p, est, published.bounds, published.table_order) for p in cands.plans]
        chosen = select_best_index(trees, published)
        latencies = [db.execute_plan(p).latency for p in cands.plans]
        native = enumerate_best_plan(query, est, cost_model)
        native_latency = db.execute_plan(native).latency
        idle = is_idle(schedule, query.id, t, total)
        executed = range(len(cands.plans)) if idle else [chosen]
        for i in executed:
            if record_execution(state.repo, query, cands.plans[i], latencies[i], t, str(cands.provenance[i])):
                features[(query.id, cands.plans[i].signature())] = trees[i]
        outcomes.append(QueryOutcome(
            t, query.id, query.template, chosen, latencies[chosen], native_latency,
            latencies, idle, state.version, str(cands.provenance[chosen]), fallback,
        ))
        frozen = freeze_after is not None and t + 1 > freeze_after
        if (t + 1) % schedule.update_every == 0 and not frozen:
            state.repo.flush()
            published = _train_update(state, schedule, features, max_sequence=t)
    state.repo.flush()
    state.model = published
    return outcomes


def _candidates(query, est, explorer, cost_model, stats, cache, t):
    key = (query, stats.version, explorer.strategy, explorer.alpha, explorer.delta,
           explorer.max_candidates, explorer.random_n, explorer.seed)
    if cache is not None and key in cache:
        return cache[key]
    fallback = False
    try:
        cands = explore(explorer.strategy, query, est, alpha=explorer.alpha, delta=explorer.delta,
                        cost_model=cost_model, max_candidates=explorer.max_candidates,
                        random_n=explorer.random_n, seed=explorer.seed * 100_003 + t)
    except ValueError:
        # e.g. brute force beyond its guard: fall back and flag it
        cands = explore("heuristic", query, est, alpha=explorer.alpha, delta=explorer.delta,
                        cost_model=cost_model, max_candidates=explorer.max_candidates)
        fallback = True
    if cache is not None:
        cache[key] = (cands, fallback)
    return cands, fallback


def training_pairs(repo: RuntimeStatsRepository, features: dict, max_sequence: int):
    by_query: dict[str, list] = {}
    for r in repo.records(max_sequence):
        by_query.setdefault(r.query_id, []).append(r)
    pairs = []
    for qid in sorted(by_query):
        recs = by_query[qid]
        pairs.extend(build_pairs(recs, [features[(qid, r.plan)] for r in recs]))
    return pairs


def _train_update(state: LoopState, schedule: TrainingSchedule, features: dict,
                  max_sequence: int) -> ComparatorModel:
    pairs = training_pairs(state.repo, features, max_sequence)
    state.trained_max_sequence.append(max(
        (r.sequence for r in state.repo.records(max_sequence)), default=-1))
    working = state.model.copy()
    if pairs:
        rng = np.random.default_rng([schedule.seed, state.version])
        order = rng.permutation(len(pairs))
        pos = 0
        for _ in range(schedule.steps_per_update):
            if pos >= len(order):
                order = rng.permutation(len(pairs))
                pos = 0
            batch = [pairs[i] for i in order[pos:pos + schedule.batch_size]]
            pos += schedule.batch_size
            _, grads = gradients(batch, working)
            state.optimizer.step(working, grads)
    # publication is a reference swap; selections keep using the old snapshot
    state.model = working
    state.version += 1
    return working
