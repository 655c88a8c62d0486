"""Learned pairwise plan ranking on top of a small cost-based optimizer.

The package is a desk-scale laboratory: a synthetic relational engine with a
deterministic latency oracle, a native histogram optimizer, plan exploration
by scaling cardinality estimates, a tree-convolution comparator trained on
executed plans, and a harness that runs deployment-style scenarios.
"""
from __future__ import annotations

from .comparator import ComparatorModel, ModelConfig, featurize, select_best
from .engine import CatalogSpec, Database, EngineConfig, generate_catalog
from .explorer import explore, explore_bruteforce, explore_heuristic, explore_random, scaling_factors
from .harness import EvaluationReport, ScenarioConfig, compute_rank_metrics, emit_report, run_scenario
from .optimizer import CostModel, NativeEstimator, Statistics, TunedEstimator, enumerate_best_plan, q_error
from .plan import PlanTree
from .schema import Catalog, Query, SubQuery
from .trainer import RuntimeStatsRepository, TrainingSchedule, build_pairs, pretrain, run_online_loop

__version__ = "0.1.0"

__all__ = [
    "Catalog", "CatalogSpec", "ComparatorModel", "CostModel", "Database", "EngineConfig",
    "EvaluationReport", "ModelConfig", "NativeEstimator", "PlanTree", "Query",
    "RuntimeStatsRepository", "ScenarioConfig", "Statistics", "SubQuery", "TrainingSchedule",
    "TunedEstimator", "build_pairs", "compute_rank_metrics", "emit_report", "enumerate_best_plan",
    "explore", "explore_bruteforce", "explore_heuristic", "explore_random", "featurize",
    "generate_catalog", "pretrain", "q_error", "run_online_loop", "run_scenario",
    "scaling_factors", "select_best",
]
