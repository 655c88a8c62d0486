"""Binary physical plan trees."""
from __future__ import annotations

import re
from dataclasses import dataclass, replace
from typing import Iterator, Optional

from .schema import InvalidSubQueryError, Query, SubQuery

SEQ_SCAN = "SeqScan"
HASH_JOIN = "HashJoin"
MERGE_JOIN = "MergeJoin"
NESTED_LOOP_JOIN = "NestedLoopJoin"

OPERATORS = (SEQ_SCAN, HASH_JOIN, MERGE_JOIN, NESTED_LOOP_JOIN)
JOIN_OPERATORS = (HASH_JOIN, MERGE_JOIN, NESTED_LOOP_JOIN)


class InvalidPlanError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class PlanTree:
    """A scan leaf or a join with exactly two children.

    ``est_rows`` and ``row_width`` are annotations only; they take no part in
    :meth:`signature`, which is the structural identity used for dedup.
    """

    op: str
    subquery: SubQuery
    left: Optional["PlanTree"] = None
    right: Optional["PlanTree"] = None
    table: Optional[str] = None
    est_rows: float = 1.0
    row_width: float = 0.0

    @property
    def is_scan(self) -> bool:
        return self.op == SEQ_SCAN

    @property
    def tables(self) -> frozenset:
        return self.subquery.tables

    @property
    def query(self) -> Query:
        return self.subquery.query

    def children(self) -> tuple["PlanTree", ...]:
        if self.is_scan:
            return ()
        return (self.left, self.right)

    def nodes(self) -> Iterator["PlanTree"]:
        """Pre-order traversal."""
        yield self
        for c in self.children():
            yield from c.nodes()

    def post_order(self) -> Iterator["PlanTree"]:
        for c in self.children():
            yield from c.post_order()
        yield self

    @property
    def num_nodes(self) -> int:
        return sum(1 for _ in self.nodes())

    def signature(self) -> str:
        if self.is_scan:
            return f"({SEQ_SCAN} {self.table})"
        return f"({self.op} {self.left.signature()} {self.right.signature()})"

    def __str__(self):
        return self.signature()

    def annotate(self, est) -> "PlanTree":
        """Copy with ``est_rows`` recomputed from an estimator at every node."""
        if self.is_scan:
            return replace(self, est_rows=float(est.estimate(self.subquery)))
        return replace(
            self,
            left=self.left.annotate(est),
            right=self.right.annotate(est),
            est_rows=float(est.estimate(self.subquery)),
        )

    def validate(self) -> None:
        if self.op not in OPERATORS:
            raise InvalidPlanError(f"unknown operator {self.op!r}")
        if self.is_scan:
            if self.left is not None or self.right is not None:
                raise InvalidPlanError("scan nodes take no children")
            if self.table is None or self.tables != frozenset([self.table]):
                raise InvalidPlanError("scan sub-query must be its own table")
            return
        if self.left is None or self.right is None:
            raise InvalidPlanError("join nodes need two children")
        if self.left.tables & self.right.tables:
            raise InvalidPlanError("join children overlap")
        if self.left.tables | self.right.tables != self.tables:
            raise InvalidPlanError("join sub-query is not the union of its children")
        if not self.subquery.is_connected:
            raise InvalidPlanError(f"disconnected sub-query {sorted(self.tables)}")
        self.left.validate()
        self.right.validate()

    def validate_root(self) -> None:
        self.validate()
        if self.tables != frozenset(self.query.tables):
            raise InvalidPlanError("root does not cover the whole query")


def scan(query: Query, table: str, est_rows: float = 1.0, row_width: float = 0.0) -> PlanTree:
    return PlanTree(SEQ_SCAN, SubQuery(query, frozenset([table])), table=table,
                    est_rows=est_rows, row_width=row_width)


def join(op: str, left: PlanTree, right: PlanTree, est_rows: float = 1.0) -> PlanTree:
    if op not in JOIN_OPERATORS:
        raise InvalidPlanError(f"{op!r} is not a join operator")
    sub = SubQuery(left.query, left.tables | right.tables)
    return PlanTree(op, sub, left, right, est_rows=est_rows,
                    row_width=left.row_width + right.row_width)


_TOKEN = re.compile(r"\(|\)|[^\s()]+")


def parse_plan(text: str, query: Query, catalog=None) -> PlanTree:
    """Inverse of :meth:`PlanTree.signature`."""
    tokens = _TOKEN.findall(text)
    pos = 0

    def parse():
        nonlocal pos
        if tokens[pos] != "(":
            raise InvalidPlanError(f"expected '(' at token {pos}")
        op = tokens[pos + 1]
        pos += 2
        if op == SEQ_SCAN:
            table = tokens[pos]
            pos += 1
            width = catalog.table(table).row_width if catalog is not None else 0.0
            node = scan(query, table, row_width=width)
        else:
            left = parse()
            right = parse()
            try:
                node = join(op, left, right)
            except InvalidSubQueryError as exc:
                raise InvalidPlanError(str(exc)) from exc
        if tokens[pos] != ")":
            raise InvalidPlanError(f"expected ')' at token {pos}")
        pos += 1
        return node

    try:
        plan = parse()
    except IndexError:
        raise InvalidPlanError(f"truncated plan {text!r}") from None
    plan.validate()
    return plan
