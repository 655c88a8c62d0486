"""Catalog and query descriptions shared by every module."""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property


class InvalidSpecError(ValueError):
    pass


class InvalidSubQueryError(ValueError):
    pass


@dataclass(frozen=True)
class ColumnDef:
    name: str
    domain_size: int


@dataclass(frozen=True)
class TableDef:
    name: str
    columns: tuple[ColumnDef, ...]
    row_count: int = 0

    def column_index(self, name: str) -> int:
        for i, col in enumerate(self.columns):
            if col.name == name:
                return i
        raise KeyError(f"unknown column {self.name}.{name}")

    @property
    def row_width(self) -> int:
        # 4-byte integers
        return 4 * len(self.columns)


@dataclass(frozen=True)
class Catalog:
    tables: tuple[TableDef, ...]

    def __post_init__(self):
        names = [t.name for t in self.tables]
        if len(set(names)) != len(names):
            raise InvalidSpecError("table names must be unique")

    @cached_property
    def _by_name(self) -> dict[str, TableDef]:
        return {t.name: t for t in self.tables}

    def table(self, name: str) -> TableDef:
        try:
            return self._by_name[name]
        except KeyError:
            raise KeyError(f"unknown table {name!r}") from None

    @property
    def table_names(self) -> tuple[str, ...]:
        return tuple(t.name for t in self.tables)

    def table_index(self, name: str) -> int:
        return self.table_names.index(name)


@dataclass(frozen=True, order=True)
class JoinEdge:
    """Equality predicate ``left_table.left_col = right_table.right_col``."""

    left_table: str
    left_col: str
    right_table: str
    right_col: str

    def touches(self, tables) -> bool:
        return self.left_table in tables and self.right_table in tables

    def __str__(self):
        return f"{self.left_table}.{self.left_col}={self.right_table}.{self.right_col}"


@dataclass(frozen=True, order=True)
class RangeFilter:
    """Inclusive integer range ``lo <= table.column <= hi``."""

    table: str
    column: str
    lo: int
    hi: int

    def __str__(self):
        return f"{self.table}.{self.column} in [{self.lo},{self.hi}]"


@dataclass(frozen=True)
class Query:
    id: str
    tables: tuple[str, ...]
    joins: tuple[JoinEdge, ...] = ()
    filters: tuple[RangeFilter, ...] = ()
    template: int = -1

    def __post_init__(self):
        if len(set(self.tables)) != len(self.tables):
            raise InvalidSpecError(f"query {self.id}: self-joins are not supported")
        for e in self.joins:
            if e.left_table == e.right_table:
                raise InvalidSpecError(f"query {self.id}: self-join edge {e}")
            if not e.touches(self.tables):
                raise InvalidSpecError(f"query {self.id}: edge {e} references a table outside the query")
        for f in self.filters:
            if f.table not in self.tables:
                raise InvalidSpecError(f"query {self.id}: filter on unknown table {f.table}")
        if not is_connected(frozenset(self.tables), self.joins):
            raise InvalidSpecError(f"query {self.id}: join graph is not connected")

    @property
    def size(self) -> int:
        return len(self.tables)

    def edges_within(self, tables) -> tuple[JoinEdge, ...]:
        return tuple(e for e in self.joins if e.touches(tables))

    def filters_on(self, table: str) -> tuple[RangeFilter, ...]:
        return tuple(f for f in self.filters if f.table == table)

    def sub(self, tables) -> SubQuery:
        return SubQuery(self, frozenset(tables))

    def validate(self, catalog: Catalog) -> None:
        for t in self.tables:
            catalog.table(t)
        for e in self.joins:
            catalog.table(e.left_table).column_index(e.left_col)
            catalog.table(e.right_table).column_index(e.right_col)
        for f in self.filters:
            catalog.table(f.table).column_index(f.column)

    def to_line(self) -> str:
        """Render in the workload-file syntax."""
        parts = [f"ID {self.id}", "TABLES " + ",".join(self.tables)]
        if self.joins:
            parts.append("JOIN " + ",".join(str(e) for e in self.joins))
        if self.filters:
            parts.append("FILTER " + ",".join(str(f) for f in self.filters))
        if self.template >= 0:
            parts.append(f"TEMPLATE {self.template}")
        return " ".join(parts)


@dataclass(frozen=True)
class SubQuery:
    query: Query
    tables: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        if not self.tables or not self.tables <= set(self.query.tables):
            raise InvalidSubQueryError(f"{sorted(self.tables)} is not a subset of query {self.query.id}")

    @property
    def size(self) -> int:
        return len(self.tables)

    @property
    def is_connected(self) -> bool:
        return is_connected(self.tables, self.query.joins)

    def check_connected(self) -> None:
        if not self.is_connected:
            raise InvalidSubQueryError(
                f"sub-query {sorted(self.tables)} of {self.query.id} is disconnected"
            )

    @property
    def edges(self) -> tuple[JoinEdge, ...]:
        return self.query.edges_within(self.tables)

    @property
    def sorted_tables(self) -> tuple[str, ...]:
        return tuple(sorted(self.tables))


def is_connected(tables: frozenset, edges) -> bool:
    if not tables:
        return False
    start = next(iter(sorted(tables)))
    seen = {start}
    frontier = [start]
    while frontier:
        t = frontier.pop()
        for e in edges:
            if not e.touches(tables):
                continue
            for a, b in ((e.left_table, e.right_table), (e.right_table, e.left_table)):
                if a == t and b not in seen:
                    seen.add(b)
                    frontier.append(b)
    return len(seen) == len(tables)


def connected_subsets(query: Query) -> list[frozenset]:
    """All connected sub-queries of ``query``, ordered by size then by sorted names."""
    names = sorted(query.tables)
    out = []
    n = len(names)
    for mask in range(1, 1 << n):
        s = frozenset(names[i] for i in range(n) if mask >> i & 1)
        if is_connected(s, query.joins):
            out.append(s)
    out.sort(key=lambda s: (len(s), sorted(s)))
    return out
