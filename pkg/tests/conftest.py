from __future__ import annotations

import pytest
from hypothesis import HealthCheck, settings

from planrank.engine import CatalogSpec, Database
from planrank.harness import ScenarioConfig
from planrank.schema import JoinEdge, Query, RangeFilter

settings.register_profile("planrank", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("planrank")

# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def small_db():
    """Four small correlated tables; cheap enough for exhaustive oracles."""
    return Database.generate(3, CatalogSpec(num_tables=4, rows_per_table=120,
                                            domains=(30, 30, 8), correlation=0.7))


@pytest.fixture(scope="session")
def reference_config():
    return ScenarioConfig()


@pytest.fixture(scope="session")
def reference_db(reference_config):
    from planrank.harness import build_database
    return build_database(reference_config)


@pytest.fixture
def chain_query():
    return Query("chain", ("t0", "t1", "t2"),
                 (JoinEdge("t0", "c0", "t1", "c0"), JoinEdge("t1", "c1", "t2", "c1")),
                 (RangeFilter("t0", "c2", 0, 3),))


@pytest.fixture
def tiny_config():
    """A scenario small enough for unit tests (seconds, not minutes)."""
    return ScenarioConfig().with_overrides({
        "num_tables": "4", "rows_per_table": "300", "domains": "300,300,10,10",
        "templates": "4", "count": "40", "split": "30", "pretrain_plans": "150",
        "pretrain_steps": "150", "update_every": "10", "steps_per_update": "20",
        "growth_every": "10", "ablation_dims": "1,2",
    })

