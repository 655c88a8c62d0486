"""The online loop on a shortened workload.

Each query picks a candidate with the current model, executes it and all
other candidates while idle, and every update_every queries the model is
retrained on pairs from what ran before. The printed curve is accumulated
latency relative to the native optimizer.

    python3 demos/03_learning_curve.py [count]
"""
from __future__ import annotations

import sys

from planrank.harness import ScenarioConfig, run_scenario

count = int(sys.argv[1]) if len(sys.argv) > 1 else 150
config = ScenarioConfig().with_overrides({"scenario": "curve", "count": str(count),
                                          "split": str(count * 3 // 4)})
report = run_scenario(config)
acc = report.accumulated()
print(f"{'queries':>8} {'native':>14} {'learned':>14} {'fastest':>14} {'learned/native':>15}")
for t in range(config.update_every - 1, count, config.update_every):
    n, l, f = acc["native"][t], acc["learned"][t], acc["fastest"][t]
    print(f"{t + 1:>8} {n:>14.4g} {l:>14.4g} {f:>14.4g} {l / n:>15.3f}")
run = report.system("learned")
metrics = report.rank_metrics(run)
print(f"\nP1 = {metrics[1]:.2f}, P5 = {metrics[5]:.2f} over {count} queries, {run.updates} model updates")
