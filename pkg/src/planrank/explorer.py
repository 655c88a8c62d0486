"""Candidate plan generation by scaling cardinality estimates."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .optimizer import (
    AssignmentEstimator,
    CardinalityEstimator,
    CostModel,
    TunedEstimator,
    enumerate_best_plan,
)
from .plan import JOIN_OPERATORS, PlanTree, join, scan
from .schema import Query, SubQuery, connected_subsets, is_connected

DEFAULT_MAX_CANDIDATES = 50
BRUTEFORCE_SUBQUERY_LIMIT = 12


class BruteForceGuardError(ValueError):
    pass


@dataclass(frozen=True)
class Provenance:
    strategy: str  # "native", "heuristic", "bruteforce" or "random"
    f: float = 1.0
    k: int = 0

    def __str__(self):
        if self.strategy == "native":
            return "native"
        if self.strategy == "random":
            return f"random:{self.k}"
        return f"{self.strategy}:f={self.f!r}:k={self.k}"


@dataclass
class CandidateList:
    query: Query
    plans: list[PlanTree] = field(default_factory=list)
    provenance: list[Provenance] = field(default_factory=list)
    generation_calls: int = 0
    _seen: set = field(default_factory=set, repr=False)

    def add(self, plan: PlanTree, prov: Provenance) -> bool:
        sig = plan.signature()
        if sig in self._seen:
            return False
        self._seen.add(sig)
        self.plans.append(plan)
        self.provenance.append(prov)
        return True

    def cap(self, limit: Optional[int]) -> "CandidateList":
        if limit is not None and len(self.plans) > limit:
            del self.plans[limit:]
            del self.provenance[limit:]
        return self

    def __len__(self):
        return len(self.plans)

    def __iter__(self):
        return iter(self.plans)


def scaling_factors(alpha: float, delta: float) -> list[float]:
    """Geometric guesses ``alpha**t`` covering q-errors up to ``delta``.

    Returned in exploration order: increasing ``|log f|``, smaller ``f`` first on ties.
    """
    if not alpha > 1:
        raise ValueError("alpha must exceed 1")
    if not delta >= 1:
        raise ValueError("delta must be at least 1")
    span = math.log(delta) / math.log(alpha)
    # guard against log rounding, e.g. log_10(100) = 2.0000000000000004
    r = round(span)
    if abs(span - r) < 1e-9:
        span = float(r)
    lo, hi = math.floor(-span), math.ceil(span)
    ts = sorted(range(lo, hi + 1), key=lambda t: (abs(t), t))
    return [float(alpha) ** t for t in ts]


def explore_heuristic(
    query: Query,
    est: CardinalityEstimator,
    alpha: float = 10.0,
    delta: float = 100.0,
    cost_model: Optional[CostModel] = None,
    max_candidates: Optional[int] = DEFAULT_MAX_CANDIDATES,
) -> CandidateList:
    """Tune all size-``k`` estimates together by each ``f``; ``f`` closest to 1 first."""
    out = CandidateList(query)
    for f in scaling_factors(alpha, delta):
        for k in range(1, query.size + 1):
            plan = enumerate_best_plan(query, TunedEstimator(est, k, f), cost_model)
            out.generation_calls += 1
            prov = Provenance("native") if f == 1.0 else Provenance("heuristic", f, k)
            out.add(plan, prov)
    return out.cap(max_candidates)


def explore_bruteforce(
    query: Query,
    est: CardinalityEstimator,
    alpha: float = 10.0,
    delta: float = 100.0,
    cost_model: Optional[CostModel] = None,
    max_candidates: Optional[int] = None,
    on_assignment=None,
) -> CandidateList:
    """One plan per assignment of a factor to every connected sub-query.

    ``on_assignment(factors, plan)`` is called for every assignment, which
    lets callers inspect the tuned estimators themselves.
    """
    subs = connected_subsets(query)
    if len(subs) > BRUTEFORCE_SUBQUERY_LIMIT:
        raise BruteForceGuardError(
            f"query {query.id} has {len(subs)} connected sub-queries "
            f"(limit {BRUTEFORCE_SUBQUERY_LIMIT}); use the heuristic strategy"
        )
    factors = scaling_factors(alpha, delta)
    out = CandidateList(query)
    native = enumerate_best_plan(query, est, cost_model)
    out.add(native, Provenance("native"))
    for combo in itertools.product(factors, repeat=len(subs)):
        assignment = dict(zip(subs, combo))
        plan = enumerate_best_plan(query, AssignmentEstimator(est, assignment), cost_model)
        out.generation_calls += 1
        if on_assignment is not None:
            on_assignment(assignment, plan)
        out.add(plan, Provenance("bruteforce", max(combo, key=lambda f: abs(math.log(f))), 0))
    return out.cap(max_candidates)


def random_plan(query: Query, rng: np.random.Generator, est: Optional[CardinalityEstimator] = None,
                max_tries: int = 10_000) -> PlanTree:
    """Uniform over (tree shape x leaf permutation x operators), restricted to valid plans.

    Rejection sampling keeps the distribution uniform over the valid subset.
    """
    tables = list(query.tables)
    for _ in range(max_tries):
        perm = [tables[i] for i in rng.permutation(len(tables))]
        plan = _random_shape(query, perm, rng, est)
        if plan is not None:
            return plan
    raise RuntimeError(f"could not sample a valid plan for {query.id}")


def _catalan_split_weights(n: int) -> np.ndarray:
    cat = [1]
    for i in range(1, n):
        cat.append(cat[-1] * 2 * (2 * i - 1) // (i + 1))
    return np.array([cat[i] * cat[n - 2 - i] for i in range(n - 1)], dtype=float)


def _random_shape(query, leaves, rng, est):
    n = len(leaves)
    if n == 1:
        t = leaves[0]
        sub = SubQuery(query, frozenset([t]))
        rows = est.estimate(sub) if est is not None else 1.0
        width = est.row_width(t) if est is not None else 0.0
        return scan(query, t, rows, width)
    # left subtree size chosen with Catalan weights gives a uniform shape
    w = _catalan_split_weights(n)
    i = int(rng.choice(n - 1, p=w / w.sum())) + 1
    left_tables, right_tables = frozenset(leaves[:i]), frozenset(leaves[i:])
    if not (is_connected(left_tables, query.joins) and is_connected(right_tables, query.joins)):
        return None
    left = _random_shape(query, leaves[:i], rng, est)
    if left is None:
        return None
    right = _random_shape(query, leaves[i:], rng, est)
    if right is None:
        return None
    op = JOIN_OPERATORS[int(rng.integers(len(JOIN_OPERATORS)))]
    rows = est.estimate(SubQuery(query, left_tables | right_tables)) if est is not None else 1.0
    return join(op, left, right, est_rows=rows)


def explore_random(query: Query, n: int, seed: int,
                   est: Optional[CardinalityEstimator] = None) -> CandidateList:
    """``n`` seeded random valid plans, deduplicated; the native plan is not added."""
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(seed)
    out = CandidateList(query)
    for i in range(n):
        out.add(random_plan(query, rng, est), Provenance("random", 1.0, i))
        out.generation_calls += 1
    return out


def explore(strategy: str, query: Query, est: CardinalityEstimator, *, alpha=10.0, delta=100.0,
            cost_model=None, max_candidates=DEFAULT_MAX_CANDIDATES, random_n=None, seed=0):
    if strategy == "heuristic":
        return explore_heuristic(query, est, alpha, delta, cost_model, max_candidates)
    if strategy == "bruteforce":
        return explore_bruteforce(query, est, alpha, delta, cost_model, max_candidates)
    if strategy == "random":
        n = random_n or query.size * len(scaling_factors(alpha, delta))
        return explore_random(query, n, seed, est).cap(max_candidates)
    raise ValueError(f"unknown exploration strategy {strategy!r}")
