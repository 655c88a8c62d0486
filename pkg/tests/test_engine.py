from __future__ import annotations

import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from planrank.engine import (
    CatalogSpec,
    Database,
    EngineConfig,
    generate_catalog,
    node_work,
    parse_query,
    read_fixture,
    read_workload,
    write_fixture,
    write_workload,
)
from planrank.explorer import random_plan
from planrank.optimizer import NativeEstimator, Statistics, q_error
from planrank.plan import HASH_JOIN, MERGE_JOIN, NESTED_LOOP_JOIN, join, scan
from planrank.schema import (
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
from planrank.workload import random_query


def nested_loop_count(db: Database, query: Query, tables) -> int:
    """Reference join: tuple-at-a-time nested loops over the filtered relations."""
    tables = sorted(tables)
    schemas = {t: db.catalog.table(t) for t in tables}

    def passes(t, row):
        return all(f.lo <= row[schemas[t].column_index(f.column)] <= f.hi for f in query.filters_on(t))

    rows = {t: [r for r in db.relation(t).tuples.tolist() if passes(t, r)] for t in tables}
    edges = query.edges_within(frozenset(tables))
    partial = [{}]
    done = set()
    order = [tables[0]]
    while len(order) < len(tables):
        order.append(next(t for t in tables if t not in order
                          and any(e.touches(set(order) | {t}) and t in (e.left_table, e.right_table) for e in edges)))
    for t in order:
        done.add(t)
        live = [e for e in edges if e.left_table in done and e.right_table in done and t in (e.left_table, e.right_table)]
        nxt = []
        for combo in partial:
            for r in rows[t]:
                cand = {**combo, t: r}
                if all(cand[e.left_table][schemas[e.left_table].column_index(e.left_col)]
                       == cand[e.right_table][schemas[e.right_table].column_index(e.right_col)]
                       for e in live):
                    nxt.append(cand)
        partial = nxt
    return len(partial)


def make_db(tables: dict, weights=None) -> Database:
    defs, data = [], {}
    for name, (doms, rows) in tables.items():
        cols = tuple(ColumnDef(f"c{i}", d) for i, d in enumerate(doms))
        arr = np.array(rows, dtype=np.int64).reshape(-1, len(doms))
        defs.append(TableDef(name, cols, len(arr)))
        data[name] = arr
    return Database(Catalog(tuple(defs)), data, config=EngineConfig(weights) if weights else None)


# -- generation -------------------------------------------------------------------

def test_generate_catalog_is_deterministic():
    spec = CatalogSpec(num_tables=4, rows_per_table=1000, domains=(100, 50), correlation=0.0)
    c1, d1 = generate_catalog(1, spec)
    c2, d2 = generate_catalog(1, spec)
    assert c1 == c2
    for name in c1.table_names:
        assert np.array_equal(d1[name], d2[name])
    _, d3 = generate_catalog(2, spec)
    assert any(not np.array_equal(d1[n], d3[n]) for n in c1.table_names)


def test_uncorrelated_columns_are_uniform_within_ten_percent():
    spec = CatalogSpec(num_tables=4, rows_per_table=1000, domains=(10, 20, 50), correlation=0.0)
    catalog, data = generate_catalog(1, spec)
    for t in catalog.tables:
        for j, col in enumerate(t.columns):
            counts = np.bincount(data[t.name][:, j], minlength=col.domain_size)
            expected = 1000 / col.domain_size
            assert np.all(np.abs(counts - expected) <= 0.1 * expected)


def test_catalog_values_within_domains_and_row_counts():
    spec = CatalogSpec(num_tables=3, rows_per_table=(10, 20, 30), domains=(7, 3), correlation=0.8)
    catalog, data = generate_catalog(5, spec)
    assert [t.row_count for t in catalog.tables] == [10, 20, 30]
    for t in catalog.tables:
        assert data[t.name].shape == (t.row_count, 2)
        for j, col in enumerate(t.columns):
            assert data[t.name][:, j].min() >= 0 and data[t.name][:, j].max() < col.domain_size


@pytest.mark.parametrize("spec", [
    CatalogSpec(num_tables=0),
    CatalogSpec(num_tables=2, rows_per_table=0),
    CatalogSpec(num_tables=2, domains=()),
    CatalogSpec(num_tables=2, correlation=1.5),
])
def test_invalid_catalog_specs(spec):
    with pytest.raises(InvalidSpecError):
        generate_catalog(0, spec)


def _max_three_table_qerror(db, seed, n=200):
    stats = Statistics(db)
    est = NativeEstimator(stats)
    rng = np.random.default_rng(seed)
    worst = 1.0
    for i in range(n):
        q = random_query(db.catalog, rng, 3, 3, qid=f"r{i}", join_columns=("c0", "c1"))
        sub = SubQuery(q, frozenset(q.tables))
        worst = max(worst, q_error(est.estimate(sub), max(1, db.true_cardinality(sub))))
    return worst


def test_correlated_catalog_defeats_the_independence_estimate():
    spec = CatalogSpec(num_tables=6, rows_per_table=2000, domains=(2000, 2000, 10, 10), correlation=0.9)
    db = Database.generate(1, spec)
    assert _max_three_table_qerror(db, 0) >= 5


def test_reference_catalog_defeats_the_independence_estimate(reference_db):
    assert _max_three_table_qerror(reference_db, 0) >= 5


# -- true cardinality -------------------------------------------------------------------

def test_single_table_cardinality_is_row_count(small_db):
    q = Query("q", ("t1",))
    assert small_db.true_cardinality(SubQuery(q, frozenset({"t1"}))) == small_db.catalog.table("t1").row_count


def test_empty_filter_gives_zero(small_db):
    q = Query("q", ("t0",), (), (RangeFilter("t0", "c0", 5, 4),))
    assert small_db.true_cardinality(q.sub({"t0"})) == 0


def test_disconnected_subquery_is_rejected(small_db, chain_query):
    with pytest.raises(InvalidSubQueryError):
        small_db.true_cardinality(SubQuery(chain_query, frozenset({"t0", "t2"})))


def test_two_table_join_matches_nested_loop(small_db):
    q = Query("q", ("t0", "t1"), (JoinEdge("t0", "c0", "t1", "c1"),), (RangeFilter("t1", "c2", 1, 5),))
    assert small_db.true_cardinality(q.sub(q.tables)) == nested_loop_count(small_db, q, q.tables)


def test_cyclic_join_matches_nested_loop(small_db):
    q = Query("q", ("t0", "t1", "t2"), (
        JoinEdge("t0", "c0", "t1", "c0"), JoinEdge("t1", "c1", "t2", "c1"), JoinEdge("t0", "c2", "t2", "c2"),
    ))
    assert small_db.true_cardinality(q.sub(q.tables)) == nested_loop_count(small_db, q, q.tables)


@given(st.integers(0, 10_000))
def test_random_subqueries_match_nested_loop(seed):
    db = Database.generate(seed % 7, CatalogSpec(num_tables=4, rows_per_table=40, domains=(12, 12, 5),
                                                 correlation=0.6))
    rng = np.random.default_rng(seed)
    q = random_query(db.catalog, rng, 1, 3)
    filt = tuple(RangeFilter(t, "c2", int(rng.integers(5)), 4) for t in q.tables if rng.random() < 0.5)
    q = Query(q.id, q.tables, q.joins, filt)
    assert db.true_cardinality(q.sub(q.tables)) == nested_loop_count(db, q, q.tables)


# -- latency oracle ------------------------------------------------------------------------

def test_seq_scan_latency_is_row_count():
    db = make_db({"a": ((10,), [[i % 10] for i in range(1000)])})
    q = Query("q", ("a",))
    assert db.execute_plan(scan(q, "a")).latency == 1000


def test_nested_loop_work_formula():
    # a.x = 0..99, b.x = 0..49 and 100..149: 50 matches
    db = make_db({"a": ((200,), [[i] for i in range(100)]),
                  "b": ((200,), [[i] for i in range(50)] + [[i] for i in range(100, 150)])})
    q = Query("q", ("a", "b"), (JoinEdge("a", "c0", "b", "c0"),))
    plan = join(NESTED_LOOP_JOIN, scan(q, "a"), scan(q, "b"))
    m = db.execute_plan(plan)
    assert m.root_rows == 50
    assert m.latency == 100 * 100 + 50 + 100 + 100
    assert node_work(NESTED_LOOP_JOIN, 50, 100, 100) == 10050


def test_hash_and_merge_work_formulas():
    assert node_work(HASH_JOIN, 7, 10, 20) == 37
    assert node_work(MERGE_JOIN, 7, 8, 4) == pytest.approx(8 * 3 + 4 * 2 + 12 + 7)
    assert node_work(MERGE_JOIN, 0, 1, 0) == 1


def test_hash_beats_nested_loop_when_inputs_dwarf_output(reference_db):
    checked = 0
    for a, b in (("t0", "t1"), ("t2", "t3")):
        for v, lc, rc in itertools.product(range(10), ("c0", "c1"), ("c0", "c1")):
            q = Query("q", (a, b), (JoinEdge(a, lc, b, rc),), (RangeFilter(a, "c2", v, v),))
            sizes = [reference_db.true_cardinality(q.sub({t})) for t in (a, b)]
            out = reference_db.true_cardinality(q.sub(q.tables))
            if min(sizes) < 10 * max(out, 1):
                continue
            left, right = scan(q, a), scan(q, b)
            hash_lat = reference_db.execute_plan(join(HASH_JOIN, left, right)).latency
            nlj_lat = reference_db.execute_plan(join(NESTED_LOOP_JOIN, left, right)).latency
            assert hash_lat < nlj_lat
            checked += 1
    assert checked >= 1


def test_operator_weights_scale_work():
    rows = [[i % 5] for i in range(20)]
    q = Query("q", ("a", "b"), (JoinEdge("a", "c0", "b", "c0"),))
    plan = join(HASH_JOIN, scan(q, "a"), scan(q, "b"))
    base = make_db({"a": ((5,), rows), "b": ((5,), rows)}).execute_plan(plan).latency
    heavy = make_db({"a": ((5,), rows), "b": ((5,), rows)},
                    {"SeqScan": 1.0, "HashJoin": 2.0}).execute_plan(plan).latency
    assert heavy - base == base - 40


@given(st.integers(0, 10_000))
def test_root_rows_equal_true_cardinality_for_any_plan(seed):
    db = Database.generate(1, CatalogSpec(num_tables=4, rows_per_table=60, domains=(15, 15, 6),
                                          correlation=0.5))
    rng = np.random.default_rng(seed)
    q = random_query(db.catalog, rng, 1, 4)
    plan = random_plan(q, rng)
    m = db.execute_plan(plan)
    assert m.root_rows == db.true_cardinality(q.sub(q.tables))
    assert db.execute_plan(plan, materialize=True) == m
    assert m.latency > 0


def test_latency_is_repeatable(small_db, chain_query):
    plan = random_plan(chain_query, np.random.default_rng(4))
    first = small_db.execute_plan(plan)
    small_db._latency_cache.clear()
    assert small_db.execute_plan(plan) == first


# -- data growth --------------------------------------------------------------------------

def _growth_db():
    spec = CatalogSpec(num_tables=3, rows_per_table=400, domains=(20, 20), correlation=0.5,
                       initial_fraction=0.5)
    return Database.generate(9, spec)


def test_half_load_plus_four_eighth_steps_loads_everything():
    db = _growth_db()
    assert db.fraction == 0.5
    for _ in range(4):
        assert db.apply_data_growth(0.125) is False
    assert db.fraction == 1.0
    assert [t.row_count for t in db.catalog.tables] == [400, 400, 400]
    assert db.apply_data_growth(0.125) is True  # beyond 100%: no-op, flagged


def test_growth_step_zero_changes_nothing():
    db = _growth_db()
    q = Query("q", ("t0", "t1"), (JoinEdge("t0", "c0", "t1", "c0"),))
    before = db.true_cardinality(q.sub(q.tables))
    db.apply_data_growth(0.0)
    assert db.true_cardinality(q.sub(q.tables)) == before
    assert db.fraction == 0.5


def test_growth_is_monotone_and_immediately_visible():
    db = _growth_db()
    rng = np.random.default_rng(0)
    queries = [random_query(db.catalog, rng, 1, 3, qid=f"g{i}") for i in range(15)]
    before = {q.id: db.true_cardinality(q.sub(q.tables)) for q in queries}
    single = db.true_cardinality(Query("s", ("t0",)).sub({"t0"}))
    db.apply_data_growth(0.125)
    assert db.true_cardinality(Query("s", ("t0",)).sub({"t0"})) > single
    for q in queries:
        assert db.true_cardinality(q.sub(q.tables)) >= before[q.id]


# -- file formats --------------------------------------------------------------------------

def test_fixture_round_trip(tmp_path):
    catalog, data = generate_catalog(2, CatalogSpec(num_tables=2, rows_per_table=15, domains=(9, 4)))
    p = tmp_path / "data.txt"
    write_fixture(p, catalog, data)
    text = p.read_text()
    assert text.startswith("table t0 c0:9 c1:4\n")
    c2, d2 = read_fixture(p)
    assert c2 == catalog
    for n in catalog.table_names:
        assert np.array_equal(d2[n], data[n])


def test_fixture_rejects_out_of_domain_values(tmp_path):
    p = tmp_path / "bad.txt"
    p.write_text("table a c0:3\n1\n3\n")
    catalog, data = read_fixture(p)
    with pytest.raises(InvalidSpecError):
        Database(catalog, data)


def test_workload_syntax_round_trip(tmp_path):
    q = parse_query("TABLES a,b,c JOIN a.x=b.y,b.z=c.w FILTER a.v in [2,7]")
    assert q.tables == ("a", "b", "c")
    assert q.joins == (JoinEdge("a", "x", "b", "y"), JoinEdge("b", "z", "c", "w"))
    assert q.filters == (RangeFilter("a", "v", 2, 7),)
    p = tmp_path / "w.txt"
    write_workload(p, [q])
    (back,) = read_workload(p)
    assert back == q


def test_workload_parser_rejects_garbage():
    with pytest.raises(InvalidSpecError):
        parse_query("SELECT * FROM a")
