"""Native cost-based optimizer with a pluggable cardinality estimator."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from .engine import Database, node_work
from .plan import JOIN_OPERATORS, OPERATORS, SEQ_SCAN, PlanTree, join, scan
from .schema import Catalog, Query, SubQuery, TableDef, is_connected

DEFAULT_BUCKETS = 32
DEFAULT_MAX_TABLES = 10


class TooManyTablesError(ValueError):
    pass


@dataclass
class ColumnStats:
    edges: np.ndarray
    counts: np.ndarray
    distinct: int

    def range_selectivity(self, lo: int, hi: int, rows: int) -> float:
        if rows == 0 or hi < lo:
            return 0.0
        left = np.maximum(self.edges[:-1], lo)
        right = np.minimum(self.edges[1:], hi + 1)
        width = self.edges[1:] - self.edges[:-1]
        frac = np.clip((right - left) / width, 0.0, 1.0)
        return float((frac * self.counts).sum()) / rows


@dataclass
class TableStats:
    schema: TableDef
    row_count: int
    columns: dict[str, ColumnStats]


class Statistics:
    """Histogram and distinct-count snapshot of a database (an ANALYZE)."""

    def __init__(self, db: Database, buckets: int = DEFAULT_BUCKETS):
        self.db = db
        self.buckets = buckets
        self.tables: dict[str, TableStats] = {}
        self.version = 0
        self.refresh()

    def refresh(self) -> None:
        tables = {}
        for schema in self.db.catalog.tables:
            rel = self.db.relation(schema.name)
            cols = {}
            for j, col in enumerate(schema.columns):
                b = min(self.buckets, col.domain_size)
                edges = np.linspace(0.0, col.domain_size, b + 1)
                values = rel.tuples[:, j]
                counts, _ = np.histogram(values, bins=edges)
                cols[col.name] = ColumnStats(edges, counts, int(len(np.unique(values))))
            tables[schema.name] = TableStats(schema, len(rel.tuples), cols)
        self.tables = tables
        self.version += 1

    def table(self, name: str) -> TableStats:
        return self.tables[name]

    def column(self, table: str, column: str) -> ColumnStats:
        try:
            return self.tables[table].columns[column]
        except KeyError:
            raise KeyError(f"unknown column {table}.{column}") from None


class CardinalityEstimator:
    """Interface: ``estimate(sub)`` plus the per-table facts a cost model needs."""

    def estimate(self, sub: SubQuery) -> float:
        raise NotImplementedError

    def table_rows(self, table: str) -> float:
        raise NotImplementedError

    def row_width(self, table: str) -> float:
        raise NotImplementedError


class NativeEstimator(CardinalityEstimator):
    """Histogram selectivities, independence across predicates, 1/max(distinct) joins."""

    def __init__(self, stats: Statistics):
        self.stats = stats
        self._version = stats.version
        self._cache: dict = {}

    def _check_version(self):
        if self._version != self.stats.version:
            self._cache.clear()
            self._version = self.stats.version

    def table_rows(self, table: str) -> float:
        return float(self.stats.table(table).row_count)

    def row_width(self, table: str) -> float:
        return float(self.stats.table(table).schema.row_width)

    def _table_estimate(self, query: Query, table: str) -> float:
        ts = self.stats.table(table)
        rows = float(ts.row_count)
        for f in query.filters_on(table):
            rows *= self.stats.column(table, f.column).range_selectivity(f.lo, f.hi, ts.row_count)
        return rows

    def estimate(self, sub: SubQuery) -> float:
        self._check_version()
        key = (sub.query, sub.tables)
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        value = 1.0
        for t in sorted(sub.tables):
            value *= self._table_estimate(sub.query, t)
        for e in sub.edges:
            dl = self.stats.column(e.left_table, e.left_col).distinct
            dr = self.stats.column(e.right_table, e.right_col).distinct
            value /= max(dl, dr, 1)
        value = max(1.0, value)
        self._cache[key] = value
        return value


class TunedEstimator(CardinalityEstimator):
    """Multiply the base estimate by ``f`` for every sub-query of exactly ``k`` tables."""

    def __init__(self, base: CardinalityEstimator, k: int, f: float):
        if f <= 0:
            raise ValueError("scaling factor must be positive")
        self.base, self.k, self.f = base, k, f

    def estimate(self, sub):
        e = self.base.estimate(sub)
        return self.f * e if sub.size == self.k else e

    def table_rows(self, table):
        return self.base.table_rows(table)

    def row_width(self, table):
        return self.base.row_width(table)


class AssignmentEstimator(CardinalityEstimator):
    """Per-sub-query scaling factors (the brute-force exploration knob)."""

    def __init__(self, base: CardinalityEstimator, factors: Mapping[frozenset, float]):
        self.base = base
        self.factors = dict(factors)

    def estimate(self, sub):
        return self.factors.get(sub.tables, 1.0) * self.base.estimate(sub)

    def table_rows(self, table):
        return self.base.table_rows(table)

    def row_width(self, table):
        return self.base.row_width(table)


class TrueCardinalityEstimator(CardinalityEstimator):
    """Oracle returning exact counts; no clamping, so zero results stay zero."""

    def __init__(self, db: Database):
        self.db = db

    def estimate(self, sub):
        return float(self.db.true_cardinality(sub))

    def table_rows(self, table):
        return float(self.db.relation(table).tuples.shape[0])

    def row_width(self, table):
        return float(self.db.catalog.table(table).row_width)


class AnnotationEstimator(CardinalityEstimator):
    """Reads the ``est_rows`` annotations of one plan; used for synthetic pre-training plans."""

    def __init__(self, plan: PlanTree, catalog: Catalog):
        self._rows = {n.tables: n.est_rows for n in plan.nodes()}
        self.catalog = catalog

    def estimate(self, sub):
        return self._rows[sub.tables]

    def table_rows(self, table):
        return float(self.catalog.table(table).row_count)

    def row_width(self, table):
        return float(self.catalog.table(table).row_width)


@dataclass
class CostModel:
    coefficients: Mapping[str, float] = field(
        default_factory=lambda: {op: 1.0 for op in OPERATORS}
    )

    def coefficient(self, op: str) -> float:
        return float(self.coefficients.get(op, 1.0))

    def scan_cost(self, rows: float) -> float:
        return self.coefficient(SEQ_SCAN) * node_work(SEQ_SCAN, 0, rows_in=rows)

    def join_cost(self, op: str, left_rows: float, right_rows: float, out_rows: float) -> float:
        return self.coefficient(op) * node_work(op, out_rows, left_rows, right_rows)

    def plan_cost(self, plan: PlanTree, est: Optional[CardinalityEstimator] = None) -> float:
        """Total estimated cost; ``est=None`` uses the plan's own annotations."""
        if est is None:
            rows = lambda node: node.est_rows  # noqa: E731
            table_rows = lambda t: node_rows_fallback(plan, t)  # noqa: E731
        else:
            rows = lambda node: est.estimate(node.subquery)  # noqa: E731
            table_rows = est.table_rows
        return self._cost(plan, rows, table_rows)

    def _cost(self, node, rows, table_rows):
        if node.is_scan:
            return self.scan_cost(table_rows(node.table))
        return (
            self._cost(node.left, rows, table_rows)
            + self._cost(node.right, rows, table_rows)
            + self.join_cost(node.op, rows(node.left), rows(node.right), rows(node))
        )


def node_rows_fallback(plan: PlanTree, table: str) -> float:
    for n in plan.nodes():
        if n.is_scan and n.table == table:
            return n.est_rows
    raise KeyError(table)


def plan_cost(plan: PlanTree, est: CardinalityEstimator, cost_model: Optional[CostModel] = None) -> float:
    return (cost_model or CostModel()).plan_cost(plan, est)


def q_error(estimate: float, truth: float) -> float:
    if estimate <= 0 or truth <= 0:
        raise ValueError("q-error needs positive arguments")
    return max(estimate / truth, truth / estimate)


# -- plan enumeration -------------------------------------------------------

def _masks(query: Query):
    names = sorted(query.tables)
    sets = {}
    for mask in range(1, 1 << len(names)):
        tables = frozenset(names[i] for i in range(len(names)) if mask >> i & 1)
        if is_connected(tables, query.joins):
            sets[mask] = tables
    return names, sets


def _splits(mask: int, connected: Mapping[int, frozenset]):
    sub = (mask - 1) & mask
    while sub:
        rest = mask ^ sub
        if sub in connected and rest in connected:
            yield sub, rest
        sub = (sub - 1) & mask


def enumerate_best_plan(
    query: Query,
    est: CardinalityEstimator,
    cost_model: Optional[CostModel] = None,
    max_tables: int = DEFAULT_MAX_TABLES,
) -> PlanTree:
    """Exact bushy DP over connected sub-queries, minimizing estimated cost.

    Ties go to the lexicographically smallest (left table names, operator).
    """
    cost_model = cost_model or CostModel()
    if query.size > max_tables:
        raise TooManyTablesError(f"query {query.id} joins {query.size} tables (limit {max_tables})")
    _, connected = _masks(query)
    best: dict[int, tuple[float, PlanTree]] = {}
    for mask in sorted(connected, key=lambda m: (bin(m).count("1"), m)):
        tables = connected[mask]
        sub = SubQuery(query, tables)
        if len(tables) == 1:
            (t,) = tables
            p = scan(query, t, est.estimate(sub), est.row_width(t))
            best[mask] = (cost_model.scan_cost(est.table_rows(t)), p)
            continue
        out = est.estimate(sub)
        choice = None
        for lm, rm in _splits(mask, connected):
            lc, lp = best[lm]
            rc, rp = best[rm]
            left_names = tuple(sorted(lp.tables))
            for op in JOIN_OPERATORS:
                c = lc + rc + cost_model.join_cost(op, lp.est_rows, rp.est_rows, out)
                key = (c, left_names, op)
                if choice is None or key < choice[0]:
                    choice = (key, lp, rp)
        (c, _, op), lp, rp = choice
        best[mask] = (c, join(op, lp, rp, est_rows=out))
    full = (1 << query.size) - 1
    return best[full][1]


def enumerate_all_plans(query: Query, est: Optional[CardinalityEstimator] = None) -> list[PlanTree]:
    """Every valid plan (bushy, both child orders, every join operator).

    Exponential; intended for small queries and as a test oracle.
    """
    _, connected = _masks(query)
    memo: dict[int, list[PlanTree]] = {}

    def width(t):
        return est.row_width(t) if est is not None else 0.0

    def rows(tables):
        return est.estimate(SubQuery(query, tables)) if est is not None else 1.0

    def plans(mask):
        if mask in memo:
            return memo[mask]
        tables = connected[mask]
        if len(tables) == 1:
            (t,) = tables
            out = [scan(query, t, rows(tables), width(t))]
        else:
            r = rows(tables)
            out = []
            for lm, rm in _splits(mask, connected):
                for lp in plans(lm):
                    for rp in plans(rm):
                        for op in JOIN_OPERATORS:
                            out.append(join(op, lp, rp, est_rows=r))
        memo[mask] = out
        return out

    return plans((1 << query.size) - 1)
