"""Pre-train a comparator and watch it rank candidates.

Nothing is executed while pre-training: the scalar embedding is fit to the
native cost model on synthetic plans. Across unrelated plans it tracks cost
closely. Within one query's candidate list the plans differ in a join or
two, and there the pre-trained order is rough. Online updates on executed
latencies are what sharpen it (see 03_learning_curve.py).

    python3 demos/02_comparator.py
"""
from __future__ import annotations

import numpy as np
from scipy.stats import spearmanr

from planrank.comparator import featurize
from planrank.explorer import explore_heuristic
from planrank.harness import ScenarioConfig, build_database, build_model, build_workload
from planrank.optimizer import CostModel, NativeEstimator, Statistics
from planrank.trainer import synthetic_plans

config = ScenarioConfig().with_overrides({"pretrain_plans": "800", "pretrain_steps": "1000"})
db = build_database(config)
model = build_model(config, db, dim=1, pretrained=True)
est = NativeEstimator(Statistics(db))
cost_model = CostModel(config.weights())

plans, costs = synthetic_plans(db.catalog, 200, np.random.default_rng(1), cost_model)
emb = model.embed([featurize(p, None, model.bounds, model.table_order) for p in plans])[:, 0]
print(f"held-out random plans: Spearman(embedding, native cost) = {spearmanr(emb, costs).statistic:.2f}\n")

for q in build_workload(config, db)[:4]:
    cands = explore_heuristic(q, est, config.alpha, config.delta, cost_model)
    trees = [featurize(p, est, model.bounds, model.table_order) for p in cands.plans]
    emb = model.embed(trees)[:, 0]
    costs = [cost_model.plan_cost(p, est) for p in cands.plans]
    lat = [db.execute_plan(p).latency for p in cands.plans]
    print(f"{q.id}: {len(cands)} candidates")
    if len(cands) > 2:
        print(f"  Spearman(embedding, native cost) = {spearmanr(emb, costs).statistic:.2f}")
        print(f"  Spearman(embedding, latency)     = {spearmanr(emb, lat).statistic:.2f}")
    pick = int(np.argmin(emb))
    print(f"  picked {cands.provenance[pick]}, latency {lat[pick]:.0f} (native {lat[0]:.0f}, best {min(lat):.0f})\n")
