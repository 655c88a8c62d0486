"""Shared oracles for the unit and acceptance tests."""
from __future__ import annotations

import numpy as np

from planrank.comparator import ComparatorModel, ModelConfig, PlanPairExample, feature_width, featurize, gradients, pairwise_loss
from planrank.engine import CatalogSpec, generate_catalog
from planrank.explorer import random_plan
from planrank.trainer import RandomCardinalities
from planrank.workload import random_query

CATALOG, _ = generate_catalog(0, CatalogSpec(num_tables=6, rows_per_table=500, domains=(50, 50, 5)))


def random_trees(n, seed, model=None, max_tables=5):
    """Featurized random plans with random cardinalities."""
    rng = np.random.default_rng(seed)
    order = CATALOG.table_names
    bounds = model.bounds if model is not None else None
    out = []
    for i in range(n):
        q = random_query(CATALOG, rng, 1, max_tables, qid=f"p{i}")
        plan = random_plan(q, rng, RandomCardinalities(CATALOG, rng))
        from planrank.comparator import Bounds
        out.append(featurize(plan, None, bounds or Bounds(), order))
    return out


def random_model(seed, dim=1, activation="tanh"):
    return ComparatorModel(ModelConfig(feature_width(len(CATALOG.tables)), dim=dim, activation=activation),
                           table_order=CATALOG.table_names, seed=seed)


def gradient_check(seed, dim=1, step=1e-4, floor=1e-6, max_entries=None):
    """Largest relative error between backprop and central differences on a 2-pair batch.

    relative error = |analytic - numeric| / max(|analytic|, |numeric|, floor)
    """
    rng = np.random.default_rng(seed)
    model = random_model(seed, dim)
    if dim > 1:
        model.params["cmp.w"] = rng.normal(0.0, 1.0, model.params["cmp.w"].shape)
    trees = random_trees(4, seed + 1000)
    batch = [PlanPairExample(trees[0], trees[1], 1), PlanPairExample(trees[2], trees[3], 0)]
    _, grads = gradients(batch, model)
    worst = 0.0
    for name, p in model.params.items():
        flat = p.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, max_entries, replace=False)
        g = grads[name].reshape(-1)
        for i in idx:
            old = flat[i]
            flat[i] = old + step
            up = pairwise_loss(batch, model)
            flat[i] = old - step
            down = pairwise_loss(batch, model)
            flat[i] = old
            num = (up - down) / (2 * step)
            err = abs(g[i] - num) / max(abs(g[i]), abs(num), floor)
            worst = max(worst, err)
    return worst
