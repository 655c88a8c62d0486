"""Where the native optimizer goes wrong, and what the explorer finds.

Builds the reference fixture, takes the first few workload queries and, for
each one, prints the native plan next to the heuristic candidates with their
executed latencies. Correlated columns make the independence assumption
underestimate join sizes, so some tuned estimators land on a cheaper plan.

    python3 demos/01_misestimates.py
"""
from __future__ import annotations

from planrank.explorer import explore_heuristic
from planrank.harness import ScenarioConfig, build_database, build_workload
from planrank.optimizer import CostModel, NativeEstimator, Statistics, TrueCardinalityEstimator, q_error
from planrank.schema import connected_subsets


def main(n_queries: int = 5) -> None:
    config = ScenarioConfig()
    db = build_database(config)
    est = NativeEstimator(Statistics(db))
    truth = TrueCardinalityEstimator(db)
    cost_model = CostModel(config.weights())

    for q in build_workload(config, db)[:n_queries]:
        worst = max(q_error(est.estimate(q.sub(s)), max(1.0, truth.estimate(q.sub(s))))
                    for s in connected_subsets(q))
        cands = explore_heuristic(q, est, config.alpha, config.delta, cost_model)
        lat = [db.execute_plan(p).latency for p in cands.plans]
        print(f"{q.id}: {q.size} tables, worst sub-query q-error {worst:.1f}")
        best = min(range(len(lat)), key=lat.__getitem__)
        for i, (plan, prov) in enumerate(zip(cands.plans, cands.provenance)):
            mark = " <- fastest" if i == best else ""
            print(f"  {str(prov):<22} {lat[i]:>14.0f}  {plan}{mark}")
        print(f"  native / fastest = {lat[0] / lat[best]:.2f}\n")


if __name__ == "__main__":
    main()
