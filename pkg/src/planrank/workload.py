"""Query templates and seeded workload streams."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .schema import Catalog, InvalidSpecError, JoinEdge, Query, RangeFilter


@dataclass(frozen=True)
class Template:
    tables: tuple[str, ...]
    joins: tuple[JoinEdge, ...]
    filter_columns: tuple[tuple[str, str], ...]  # (table, column) slots


def random_join_graph(catalog: Catalog, rng: np.random.Generator, size: int, join_columns=None):
    """Random spanning tree over ``size`` distinct tables, joined on random columns.

    ``join_columns`` restricts the candidate join columns by name.
    """
    names = list(catalog.table_names)
    if size > len(names):
        raise InvalidSpecError(f"cannot join {size} tables from a catalog of {len(names)}")
    chosen = [names[i] for i in sorted(rng.choice(len(names), size, replace=False))]
    order = [chosen[i] for i in rng.permutation(size)]
    edges = []
    for i in range(1, size):
        a = order[i]
        b = order[int(rng.integers(i))]
        ca = _pick_column(catalog, a, rng, join_columns)
        cb = _pick_column(catalog, b, rng, join_columns)
        edges.append(JoinEdge(b, cb, a, ca) if b < a else JoinEdge(a, ca, b, cb))
    return tuple(chosen), tuple(sorted(edges))


def _pick_column(catalog, table, rng, allowed):
    cols = [c.name for c in catalog.table(table).columns if allowed is None or c.name in allowed]
    if not cols:
        raise InvalidSpecError(f"table {table} has none of the columns {sorted(allowed)}")
    return cols[int(rng.integers(len(cols)))]


def random_templates(catalog: Catalog, n: int, seed: int, min_tables: int = 2,
                     max_tables: int = 5, join_columns=None, filter_columns=None) -> list[Template]:
    rng = np.random.default_rng(seed)
    max_tables = min(max_tables, len(catalog.tables))
    out = []
    for _ in range(n):
        size = int(rng.integers(min_tables, max_tables + 1))
        tables, joins = random_join_graph(catalog, rng, size, join_columns)
        slots = []
        for t in tables:
            slots.append((t, _pick_column(catalog, t, rng, filter_columns)))
        out.append(Template(tables, joins, tuple(slots)))
    return out


def _instantiate(template: Template, catalog: Catalog, rng, qid: str, index: int,
                 filter_prob: float, width_range) -> Query:
    filters = []
    for table, column in template.filter_columns:
        if rng.random() >= filter_prob:
            continue
        dom = catalog.table(table).columns[catalog.table(table).column_index(column)].domain_size
        width = max(1, int(round(rng.uniform(*width_range) * dom)))
        lo = int(rng.integers(0, max(1, dom - width + 1)))
        filters.append(RangeFilter(table, column, lo, min(dom - 1, lo + width - 1)))
    return Query(qid, template.tables, template.joins, tuple(filters), index)


def generate_workload(templates: Sequence[Template], count: int, seed: int, catalog: Catalog,
                      filter_prob: float = 0.7, width_range=(0.05, 0.6),
                      prefix: str = "q", max_reseeds: int = 100) -> list[Query]:
    """Seeded stream of ``count`` queries drawn uniformly from ``templates``.

    If some template never occurs (and ``count`` allows it to), the stream is
    regenerated with the next seed; the result is still a pure function of
    the inputs.
    """
    if not templates:
        raise InvalidSpecError("at least one template is required")
    for attempt in range(max_reseeds):
        rng = np.random.default_rng(seed + attempt)
        picks = rng.integers(len(templates), size=count)
        if count < len(templates) or len(set(picks.tolist())) == len(templates):
            break
    queries = []
    for i, t in enumerate(picks):
        queries.append(_instantiate(templates[int(t)], catalog, rng, f"{prefix}{i}", int(t),
                                    filter_prob, width_range))
    for q in queries:
        q.validate(catalog)
    return queries


def random_query(catalog: Catalog, rng: np.random.Generator, min_tables: int = 1,
                 max_tables: int = 5, qid: str = "r", join_columns=None) -> Query:
    size = int(rng.integers(min_tables, min(max_tables, len(catalog.tables)) + 1))
    tables, joins = random_join_graph(catalog, rng, size, join_columns)
    return Query(qid, tables, joins)
