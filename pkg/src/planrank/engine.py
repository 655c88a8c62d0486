"""In-memory relations, synthetic data, and the ground-truth oracles.

Latency here is a deterministic count of operator work over the true
intermediate result sizes, never wall-clock time.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from .plan import (
    HASH_JOIN,
    MERGE_JOIN,
    NESTED_LOOP_JOIN,
    OPERATORS,
    SEQ_SCAN,
    InvalidPlanError,
    PlanTree,
)
from .schema import (
    Catalog,
    ColumnDef,
    InvalidSpecError,
    InvalidSubQueryError,
    JoinEdge,
    Query,
    RangeFilter,
    SubQuery,
    TableDef,
)

# Zipf exponent reached at correlation = 1
MAX_SKEW = 2.0
# refuse to materialize intermediates larger than this
MATERIALIZE_LIMIT = 5_000_000


@dataclass(frozen=True)
class CatalogSpec:
    num_tables: int = 4
    rows_per_table: Union[int, Sequence[int]] = 1000
    domains: Sequence[int] = (100, 100, 50)
    correlation: float = 0.0
    initial_fraction: float = 1.0

    def row_counts(self) -> list[int]:
        if isinstance(self.rows_per_table, int):
            return [self.rows_per_table] * self.num_tables
        rows = list(self.rows_per_table)
        if len(rows) != self.num_tables:
            raise InvalidSpecError("rows_per_table must have one entry per table")
        return rows

    def validate(self) -> None:
        if self.num_tables <= 0:
            raise InvalidSpecError("num_tables must be positive")
        if any(r <= 0 for r in self.row_counts()):
            raise InvalidSpecError("rows_per_table must be positive")
        if not self.domains or any(d <= 0 for d in self.domains):
            raise InvalidSpecError("domains must be a non-empty list of positive sizes")
        if not 0.0 <= self.correlation <= 1.0:
            raise InvalidSpecError("correlation must lie in [0, 1]")
        if not 0.0 < self.initial_fraction <= 1.0:
            raise InvalidSpecError("initial_fraction must lie in (0, 1]")


@dataclass(frozen=True)
class Relation:
    schema: TableDef
    tuples: np.ndarray  # (rows, columns) int64

    def column(self, name: str) -> np.ndarray:
        return self.tuples[:, self.schema.column_index(name)]


@dataclass(frozen=True)
class LatencyMeasurement:
    plan_id: str
    latency: float
    root_rows: int


@dataclass
class EngineConfig:
    weights: Mapping[str, float] = field(
        default_factory=lambda: {op: 1.0 for op in OPERATORS}
    )

    def weight(self, op: str) -> float:
        return float(self.weights.get(op, 1.0))


def _stratified(rng: np.random.Generator, n: int) -> np.ndarray:
    return (rng.permutation(n) + 0.5) / n


def _zipf_ranks(u: np.ndarray, domain: int, skew: float) -> np.ndarray:
    if skew == 0.0:
        return np.minimum((u * domain).astype(np.int64), domain - 1)
    p = 1.0 / np.arange(1, domain + 1) ** skew
    cdf = np.cumsum(p / p.sum())
    cdf[-1] = 1.0
    return np.minimum(np.searchsorted(cdf, u, side="right"), domain - 1)


def generate_catalog(seed: int, spec: CatalogSpec) -> tuple[Catalog, dict[str, np.ndarray]]:
    """Build a catalog and the full (timestamp-ordered) tuple arrays.

    Values are Zipf ranks mapped through a permutation shared by every table,
    so hot values coincide across tables; each column's skew is
    ``MAX_SKEW * correlation * kappa`` with a seeded per-column ``kappa``.
    Within a tuple, each column reuses a shared latent draw with probability
    ``correlation``, which couples filter columns to join columns.
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    rows = spec.row_counts()
    domains = [int(d) for d in spec.domains]
    perms = {d: rng.permutation(d) for d in sorted(set(domains))}
    kappa = rng.uniform(0.0, 1.0, size=(spec.num_tables, len(domains)))

    tables = []
    data = {}
    for i in range(spec.num_tables):
        name = f"t{i}"
        n = rows[i]
        shared = _stratified(rng, n)
        cols = []
        for j, d in enumerate(domains):
            own = _stratified(rng, n)
            if spec.correlation > 0:
                use_shared = rng.random(n) < spec.correlation
                u = np.where(use_shared, shared, own)
            else:
                u = own
            skew = MAX_SKEW * spec.correlation * kappa[i, j]
            cols.append(perms[d][_zipf_ranks(u, d, skew)])
        data[name] = np.stack(cols, axis=1).astype(np.int64)
        tables.append(
            TableDef(name, tuple(ColumnDef(f"c{j}", d) for j, d in enumerate(domains)), n)
        )
    return Catalog(tuple(tables)), data


class Database:
    """Loaded relations plus a held-back, timestamp-ordered tuple pool."""

    def __init__(self, catalog: Catalog, data: Mapping[str, np.ndarray],
                 initial_fraction: float = 1.0, config: Optional[EngineConfig] = None):
        self._schemas = {t.name: t for t in catalog.tables}
        self._full = {}
        for t in catalog.tables:
            arr = np.asarray(data[t.name], dtype=np.int64).reshape(-1, len(t.columns))
            for j, col in enumerate(t.columns):
                if arr.size and (arr[:, j].min() < 0 or arr[:, j].max() >= col.domain_size):
                    raise InvalidSpecError(f"{t.name}.{col.name} has values outside its domain")
            self._full[t.name] = arr
        self._order = catalog.table_names
        self.config = config or EngineConfig()
        self.fraction = 0.0
        self.version = 0
        self._loaded = {}
        self._card_cache: dict = {}
        self._latency_cache: dict = {}
        self._set_fraction(initial_fraction)

    @classmethod
    def generate(cls, seed: int, spec: CatalogSpec, config: Optional[EngineConfig] = None):
        catalog, data = generate_catalog(seed, spec)
        return cls(catalog, data, spec.initial_fraction, config)

    def _set_fraction(self, fraction: float) -> None:
        self.fraction = min(1.0, fraction)
        for name, arr in self._full.items():
            self._loaded[name] = int(round(self.fraction * len(arr)))
        self.version += 1
        self._card_cache.clear()
        self._latency_cache.clear()

    @property
    def catalog(self) -> Catalog:
        return Catalog(tuple(
            TableDef(n, self._schemas[n].columns, self._loaded[n]) for n in self._order
        ))

    def relation(self, name: str) -> Relation:
        schema = self._schemas[name]
        rows = self._full[name][: self._loaded[name]]
        return Relation(TableDef(name, schema.columns, len(rows)), rows)

    def full_data(self) -> dict[str, np.ndarray]:
        return {n: self._full[n].copy() for n in self._order}

    def apply_data_growth(self, step: float) -> bool:
        """Load the next ``step`` fraction (of the full data) from the pool.

        Returns True when the request was a no-op because everything is
        already loaded.
        """
        if step < 0:
            raise ValueError("growth step must be non-negative")
        if step == 0:
            return False
        if self.fraction >= 1.0:
            return True
        self._set_fraction(self.fraction + step)
        return False

    # -- true cardinality ---------------------------------------------------

    def _filtered(self, query: Query, table: str) -> np.ndarray:
        rel = self.relation(table)
        mask = np.ones(len(rel.tuples), dtype=bool)
        for f in query.filters_on(table):
            col = rel.column(f.column)
            mask &= (col >= f.lo) & (col <= f.hi)
        return rel.tuples[mask]

    def true_cardinality(self, sub: SubQuery) -> int:
        sub.check_connected()
        key = (sub.query, sub.tables)
        hit = self._card_cache.get(key)
        if hit is not None:
            return hit
        edges = sub.edges
        if len(edges) == len(sub.tables) - 1:
            value = self._count_tree(sub)
        else:
            value = self._count_materialized(sub)
        self._card_cache[key] = value
        return value

    def _count_tree(self, sub: SubQuery) -> int:
        query = sub.query
        rows = {t: self._filtered(query, t) for t in sub.tables}
        adj: dict[str, list] = {t: [] for t in sub.tables}
        for e in sub.edges:
            adj[e.left_table].append((e.right_table, e.left_col, e.right_col))
            adj[e.right_table].append((e.left_table, e.right_col, e.left_col))

        def weights(t, parent):
            schema = self._schemas[t]
            w = np.ones(len(rows[t]))
            for u, my_col, other_col in adj[t]:
                if u == parent:
                    continue
                wu = weights(u, t)
                ucol = rows[u][:, self._schemas[u].column_index(other_col)]
                mine = rows[t][:, schema.column_index(my_col)]
                size = max(self._schemas[u].columns[self._schemas[u].column_index(other_col)].domain_size,
                           schema.columns[schema.column_index(my_col)].domain_size)
                msg = np.bincount(ucol, weights=wu, minlength=size)
                w = w * msg[mine]
            return w

        root = min(sub.tables)
        return int(round(float(weights(root, None).sum())))

    def _count_materialized(self, sub: SubQuery) -> int:
        order = sorted(sub.tables)
        current = {order[0]: np.arange(len(self._filtered(sub.query, order[0])))}
        rows = {t: self._filtered(sub.query, t) for t in order}
        done = {order[0]}
        while len(done) < len(order):
            nxt = next(t for t in order if t not in done and any(
                {e.left_table, e.right_table} & done and t in (e.left_table, e.right_table)
                for e in sub.edges))
            right = {nxt: np.arange(len(rows[nxt]))}
            current = _join_ids(current, right, sub.query.edges_within(done | {nxt}), rows, self._schemas)
            done.add(nxt)
        return len(next(iter(current.values())))

    # -- plan execution -------------------------------------------------------

    def execute_plan(self, plan: PlanTree, materialize: bool = False) -> LatencyMeasurement:
        """Deterministic work units of ``plan`` over the loaded data.

        With ``materialize`` the joins are actually evaluated and the observed
        intermediate sizes are used; otherwise sizes come from
        :meth:`true_cardinality`, which yields the same numbers.
        """
        sig = plan.signature()
        key = (plan.query, sig)
        if not materialize:
            hit = self._latency_cache.get(key)
            if hit is not None:
                return hit
        plan.validate()
        if materialize:
            sizes = self.materialize_sizes(plan)
            out_rows = lambda node: sizes[id(node)]  # noqa: E731
        else:
            out_rows = lambda node: self.true_cardinality(node.subquery)  # noqa: E731
        total = 0.0
        for node in plan.post_order():
            total += self.config.weight(node.op) * node_work(
                node.op,
                out_rows(node),
                *(out_rows(c) for c in node.children()),
                rows_in=self._loaded[node.table] if node.is_scan else 0,
            )
        result = LatencyMeasurement(sig, total, int(out_rows(plan)))
        if not materialize:
            self._latency_cache[key] = result
        return result

    def materialize_sizes(self, plan: PlanTree) -> dict[int, int]:
        """Evaluate ``plan`` bottom-up and return the output size of every node."""
        rows = {t: self._filtered(plan.query, t) for t in plan.tables}
        sizes: dict[int, int] = {}

        def run(node):
            if node.is_scan:
                out = {node.table: np.arange(len(rows[node.table]))}
            else:
                left = run(node.left)
                right = run(node.right)
                edges = [e for e in node.query.edges_within(node.tables)
                         if (e.left_table in node.left.tables) != (e.right_table in node.left.tables)]
                out = _join_ids(left, right, edges, rows, self._schemas)
            sizes[id(node)] = len(next(iter(out.values())))
            return out

        run(plan)
        return sizes


def node_work(op: str, out_rows: float, *child_rows: float, rows_in: float = 0) -> float:
    """Unweighted work of one operator given its input and output sizes."""
    if op == SEQ_SCAN:
        return float(rows_in)
    a, b = child_rows
    if op == HASH_JOIN:
        return float(a + b + out_rows)
    if op == MERGE_JOIN:
        return float(_sort_work(a) + _sort_work(b) + (a + b) + out_rows)
    if op == NESTED_LOOP_JOIN:
        return float(a * b + out_rows)
    raise InvalidPlanError(f"unknown operator {op!r}")


def _sort_work(n: float) -> float:
    return n * math.log2(n) if n > 1 else 0.0


def _join_ids(left: dict, right: dict, edges, rows, schemas) -> dict:
    """Join two sets of row-id tuples on every crossing edge."""
    crossing = []
    for e in edges:
        if e.left_table in left and e.right_table in right:
            crossing.append((e.left_table, e.left_col, e.right_table, e.right_col))
        elif e.right_table in left and e.left_table in right:
            crossing.append((e.right_table, e.right_col, e.left_table, e.left_col))
    if not crossing:
        raise InvalidSubQueryError("materialized join without a connecting predicate")

    def values(side, t, col):
        return rows[t][side[t], schemas[t].column_index(col)]

    lt, lc, rt, rc = crossing[0]
    lk = values(left, lt, lc)
    rk = values(right, rt, rc)
    order = np.argsort(rk, kind="stable")
    rk_sorted = rk[order]
    lo = np.searchsorted(rk_sorted, lk, side="left")
    hi = np.searchsorted(rk_sorted, lk, side="right")
    counts = hi - lo
    total = int(counts.sum())
    if total > MATERIALIZE_LIMIT:
        raise MemoryError(f"intermediate of {total} rows exceeds the materialization limit")
    li = np.repeat(np.arange(len(lk)), counts)
    starts = np.repeat(lo, counts)
    offsets = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    ri = order[starts + offsets]
    keep = np.ones(total, dtype=bool)
    for lt2, lc2, rt2, rc2 in crossing[1:]:
        keep &= values(left, lt2, lc2)[li] == values(right, rt2, rc2)[ri]
    out = {t: ids[li[keep]] for t, ids in left.items()}
    out.update({t: ids[ri[keep]] for t, ids in right.items()})
    return out


# -- file formats -----------------------------------------------------------

def write_fixture(path, catalog: Catalog, data: Mapping[str, np.ndarray]) -> None:
    """Line-delimited catalog: a ``table`` header per table, then CSV rows."""
    lines = []
    for t in catalog.tables:
        cols = " ".join(f"{c.name}:{c.domain_size}" for c in t.columns)
        lines.append(f"table {t.name} {cols}")
        for row in np.asarray(data[t.name]):
            lines.append(",".join(str(int(v)) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def read_fixture(path) -> tuple[Catalog, dict[str, np.ndarray]]:
    tables = []
    data: dict[str, list] = {}
    current = None
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("table "):
            parts = line.split()
            cols = []
            for tok in parts[2:]:
                name, _, dom = tok.partition(":")
                cols.append(ColumnDef(name, int(dom)))
            current = TableDef(parts[1], tuple(cols))
            tables.append(current)
            data[current.name] = []
            continue
        if current is None:
            raise InvalidSpecError(f"{path}:{lineno}: tuple row before any table header")
        row = [int(v) for v in line.split(",")]
        if len(row) != len(current.columns):
            raise InvalidSpecError(f"{path}:{lineno}: expected {len(current.columns)} values")
        data[current.name].append(row)
    arrays = {
        t.name: np.array(data[t.name], dtype=np.int64).reshape(-1, len(t.columns)) for t in tables
    }
    catalog = Catalog(tuple(
        TableDef(t.name, t.columns, len(arrays[t.name])) for t in tables
    ))
    return catalog, arrays


_QUERY_RE = re.compile(
    r"^(?:ID\s+(?P<id>\S+)\s+)?TABLES\s+(?P<tables>\S+)"
    r"(?:\s+JOIN\s+(?P<joins>\S+))?"
    r"(?:\s+FILTER\s+(?P<filters>.+?))?"
    r"(?:\s+TEMPLATE\s+(?P<template>\d+))?\s*$"
)
_EDGE_RE = re.compile(r"(\w+)\.(\w+)=(\w+)\.(\w+)")
_FILTER_RE = re.compile(r"(\w+)\.(\w+)\s+in\s+\[\s*(-?\d+)\s*,\s*(-?\d+)\s*\]")


def parse_query(line: str, default_id: str = "q0") -> Query:
    """Parse ``[ID id] TABLES a,b JOIN a.x=b.y FILTER a.v in [lo,hi]``."""
    m = _QUERY_RE.match(line.strip())
    if not m:
        raise InvalidSpecError(f"cannot parse query line: {line!r}")
    tables = tuple(t for t in m.group("tables").split(",") if t)
    joins = tuple(JoinEdge(*g) for g in _EDGE_RE.findall(m.group("joins") or ""))
    filters = tuple(
        RangeFilter(t, c, int(lo), int(hi)) for t, c, lo, hi in _FILTER_RE.findall(m.group("filters") or "")
    )
    template = int(m.group("template")) if m.group("template") else -1
    return Query(m.group("id") or default_id, tables, joins, filters, template)


def read_workload(path) -> list[Query]:
    out = []
    for i, raw in enumerate(Path(path).read_text().splitlines()):
        line = raw.strip()
        if line and not line.startswith("#"):
            out.append(parse_query(line, default_id=f"q{i}"))
    return out


def write_workload(path, queries: Sequence[Query]) -> None:
    Path(path).write_text("".join(q.to_line() + "\n" for q in queries))
