"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

The end-to-end criteria (9 to 13) run on the reference fixture, i.e. the
defaults of ScenarioConfig. Scenario runs are shared through session fixtures.
"""
from __future__ import annotations

import itertools
import math

import numpy as np
import pytest
from scipy.stats import spearmanr

from conftest import ACCEPTANCE_LINES
from helpers import gradient_check, random_model, random_trees
from planrank.comparator import featurize, select_best_index
from planrank.engine import CatalogSpec, Database
from planrank.explorer import explore_bruteforce, explore_heuristic, scaling_factors
from planrank.harness import SCENARIOS, build_model, build_workload, emit_report, run_scenario
from planrank.optimizer import (
    CostModel,
    NativeEstimator,
    Statistics,
    TrueCardinalityEstimator,
    enumerate_all_plans,
    enumerate_best_plan,
    q_error,
)
from planrank.schema import connected_subsets
from planrank.trainer import synthetic_plans
from planrank.workload import random_query


def report(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


@pytest.fixture(scope="session")
def reference_cost_model(reference_config):
    return CostModel(reference_config.weights())


@pytest.fixture(scope="session")
def scenario_reports(reference_config):
    cache = {}

    def get(name):
        if name not in cache:
            cache[name] = run_scenario(reference_config.with_overrides({"scenario": name}))
        return cache[name]

    return get


# -- 1 to 8: components ----------------------------------------------------------------------

def test_criterion_1_scaling_factor_set():
    fs = scaling_factors(10, 100)
    report(1, set(fs) == {0.01, 0.1, 1.0, 10.0, 100.0} and len(fs) == 5, f"F = {sorted(fs)}")


def test_criterion_2_comparator_algebra():
    worst, violations, triples = 0.0, 0, 0
    for seed in range(1000):
        model = random_model(seed)
        a, b, c = random_trees(3, 10_000 + seed)
        ab, ba = model.compare(a, b), model.compare(b, a)
        worst = max(worst, abs(ab + ba - 1.0))
        bc, ac = model.compare(b, c), model.compare(a, c)
        # compare(x, y) > 1/2 means y is preferable; preference must chain
        if ab > 0.5 and bc > 0.5:
            triples += 1
            violations += not ac > 0.5
        if ab < 0.5 and bc < 0.5:
            triples += 1
            violations += not ac < 0.5
    report(2, worst <= 1e-12 and violations == 0,
           f"max |c(a,b)+c(b,a)-1| = {worst:.2e}, {violations} transitivity violations in {triples} chained triples")


def test_criterion_3_argmin_embedding_maximizes_random_wins():
    agree, trials, tied = 0, 0, 0
    seed = 0
    while trials < 100:
        model = random_model(seed)
        trees = random_trees(10, 20_000 + seed)
        seed += 1
        emb = model.embed(trees)[:, 0]
        if len(set(emb.tolist())) < len(emb):
            tied += 1
            continue
        trials += 1
        # independent oracle: pairwise compare calls, no shared embedding batch
        wins = [sum(model.compare(trees[j], trees[i]) for j in range(10) if j != i) for i in range(10)]
        agree += int(np.argmin(emb)) == int(np.argmax(wins)) == select_best_index(trees, model)
    report(3, agree == trials, f"{agree}/{trials} trials agree ({tied} tied trials skipped)")


def test_criterion_4_gradient_check():
    errs = [gradient_check(seed) for seed in range(10)]
    report(4, max(errs) <= 1e-4, f"max relative error {max(errs):.2e} over 10 seeds, all parameters")


def test_criterion_5_pretraining_fidelity(reference_config, reference_db, reference_cost_model):
    model = build_model(reference_config, reference_db, dim=1, pretrained=True)
    plans, costs = synthetic_plans(reference_db.catalog, 200, np.random.default_rng(10_001), reference_cost_model)
    emb = model.embed([featurize(p, None, model.bounds, model.table_order) for p in plans])[:, 0]
    rho = spearmanr(emb, costs).statistic
    report(5, rho >= 0.95, f"Spearman {rho:.4f} on 200 held-out plans")


def test_criterion_6_dp_optimality(reference_db, reference_cost_model):
    est = NativeEstimator(Statistics(reference_db))
    rng = np.random.default_rng(6)
    mismatches = 0
    for i in range(50):
        q = random_query(reference_db.catalog, rng, 1, 4, qid=f"dp{i}")
        best = reference_cost_model.plan_cost(enumerate_best_plan(q, est, reference_cost_model), est)
        exhaustive = min(reference_cost_model.plan_cost(p, est) for p in enumerate_all_plans(q, est))
        mismatches += best != exhaustive
    report(6, mismatches == 0, f"{50 - mismatches}/50 queries match the exhaustive minimum exactly")


def test_criterion_7_explorer_bounds_and_contents(reference_config, reference_db, reference_cost_model):
    est = NativeEstimator(Statistics(reference_db))
    nf = len(scaling_factors(10, 100))
    queries = build_workload(reference_config, reference_db)
    counts_ok, native_first = True, True
    faster = 0
    for q in queries[:100]:
        cands = explore_heuristic(q, est, 10, 100, reference_cost_model, max_candidates=None)
        counts_ok &= cands.generation_calls == q.size * nf
        native = enumerate_best_plan(q, est, reference_cost_model)
        native_first &= cands.plans[0].signature() == native.signature() and str(cands.provenance[0]) == "native"
        lat = [reference_db.execute_plan(p).latency for p in cands.plans]
        faster += min(lat[1:], default=math.inf) < lat[0]
    pair = next(q for q in queries if q.size == 2) if any(q.size == 2 for q in queries) else None
    if pair is None:
        pair = random_query(reference_db.catalog, np.random.default_rng(7), 2, 2, qid="pair")
    brute = explore_bruteforce(pair, est, 10, 100, reference_cost_model)
    n_subs = len(connected_subsets(pair))
    brute_ok = brute.generation_calls == nf ** n_subs == 125
    ok = counts_ok and native_first and brute_ok and faster >= 1
    report(7, ok, f"calls=q*|F| {counts_ok}, native first {native_first}, "
                  f"brute force {brute.generation_calls} calls on q=2, "
                  f"{faster}/100 fixture queries have a strictly faster candidate")


def test_criterion_8_bruteforce_premise(reference_db, reference_cost_model):
    est = NativeEstimator(Statistics(reference_db))
    truth = TrueCardinalityEstimator(reference_db)
    rng = np.random.default_rng(8)
    held, worst_best = 0, 0.0
    n = 20
    for i in range(n):
        q = random_query(reference_db.catalog, rng, 2, 2, qid=f"bf{i}")
        subs = connected_subsets(q)
        true = {s: max(1.0, truth.estimate(q.sub(s))) for s in subs}
        base = {s: est.estimate(q.sub(s)) for s in subs}
        worst = max(q_error(base[s], true[s]) for s in subs)
        delta = 10.0 ** max(1, math.ceil(math.log10(worst)))
        best = math.inf

        def check(assignment, plan):
            nonlocal best
            best = min(best, max(q_error(assignment[s] * base[s], true[s]) for s in subs))

        explore_bruteforce(q, est, 10, delta, reference_cost_model, on_assignment=check)
        held += best <= 10
        worst_best = max(worst_best, best)
    report(8, held == n, f"{held}/{n} q=2 queries have an assignment within alpha "
                         f"(worst best q-error {worst_best:.2f})")


# -- 9 to 13: scenarios on the reference fixture ------------------------------------------------

def test_criterion_9_end_to_end_improvement(scenario_reports):
    r = scenario_reports("curve")
    t = r.totals()
    learned, native, fastest = t["learned"], t["native"], t["fastest"]
    ok = len(r.query_ids) == 400 and fastest <= learned <= 0.8 * native
    report(9, ok, f"learned/native = {learned / native:.3f} (need <= 0.8), "
                  f"fastest/native = {fastest / native:.3f}")


def test_criterion_10_pretraining_ablation(scenario_reports, reference_config):
    r = scenario_reports("ablation-pretrain")
    pre, cold = r.system("learned:pretrained"), r.system("learned:cold")
    k = reference_config.update_every
    head_equal = sum(cold.latencies[:k]) == sum(r.native[:k])
    margin = sum(cold.latencies) - sum(pre.latencies)
    report(10, head_equal and margin > 0,
           f"cold first {k} = native {head_equal}, cold - pretrained = {margin:.4g} "
           f"({sum(cold.latencies) / sum(r.native):.3f} vs {sum(pre.latencies) / sum(r.native):.3f} of native)")


def test_criterion_11_strategy_ablation(scenario_reports):
    r = scenario_reports("ablation-strategy")
    heur, rand = sum(r.system("learned:heuristic").latencies), sum(r.system("learned:random").latencies)
    native = sum(r.native)
    report(11, rand >= heur, f"random {rand / native:.3f} vs heuristic {heur / native:.3f} of native")


def test_criterion_12_idle_ablation(scenario_reports):
    r = scenario_reports("ablation-idle")
    tails = [float(np.mean(run.latencies[-50:])) for run in r.systems]
    records = [run.records for run in r.systems]
    rhos = [run.idle_fraction for run in r.systems]
    order = np.argsort(rhos)[::-1]
    monotone = all(records[a] >= records[b] for a, b in zip(order, order[1:]))
    spread = max(tails) / min(tails)
    detail = ", ".join(f"rho={rhos[i]:g}: {tails[i]:.4g} ({records[i]} records)" for i in order)
    report(12, spread <= 1.15 and monotone, f"last-50 max/min = {spread:.3f} (need <= 1.15); {detail}")


def test_criterion_13_determinism(scenario_reports, reference_config, tmp_path):
    mismatched = []
    # every scenario on a reduced fixture, run twice from scratch
    small = reference_config.with_overrides({"count": "60", "split": "45", "growth_every": "15",
                                             "pretrain_plans": "300", "pretrain_steps": "300",
                                             "initial_fraction": "0.5", "ablation_dims": "1,2"})
    for sc in SCENARIOS:
        cfg = small.with_overrides({"scenario": sc})
        a = emit_report(run_scenario(cfg), tmp_path / f"{sc}-a")
        b = emit_report(run_scenario(cfg), tmp_path / f"{sc}-b")
        if any(x.read_bytes() != y.read_bytes() for x, y in zip(a, b)):
            mismatched.append(sc)
    # and the full reference curve against the shared run
    a = emit_report(scenario_reports("curve"), tmp_path / "ref-a")
    b = emit_report(run_scenario(reference_config.with_overrides({"scenario": "curve"})), tmp_path / "ref-b")
    if any(x.read_bytes() != y.read_bytes() for x, y in zip(a, b)):
        mismatched.append("curve (reference)")
    report(13, not mismatched, f"{len(SCENARIOS) + 1 - len(mismatched)}/{len(SCENARIOS) + 1} re-runs byte-identical"
           + (f"; differing: {', '.join(mismatched)}" if mismatched else ""))
