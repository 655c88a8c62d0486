"""Scenario configuration, orchestration, metrics and report files."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .comparator import ComparatorModel, ModelConfig, feature_width
from .engine import CatalogSpec, Database, EngineConfig, read_fixture, read_workload
from .optimizer import CostModel, Statistics
from .plan import OPERATORS
from .schema import InvalidSpecError, Query
from .trainer import (
    ExplorerConfig,
    LoopState,
    PretrainConfig,
    QueryOutcome,
    TrainingSchedule,
    pretrain,
    run_online_loop,
)
from .workload import Template, random_templates
from .workload import generate_workload as _generate_stream

SCENARIOS = (
    "curve",
    "stable",
    "dynamic",
    "ablation-pretrain",
    "ablation-strategy",
    "ablation-idle",
    "ablation-dim",
)


# -- configuration -----------------------------------------------------------------

@dataclass
class ScenarioConfig:
    """Every knob of a scenario; the defaults are the frozen reference fixture.

    Stored on disk as flat ``key = value`` lines; tuples are comma separated.
    """

    scenario: str = "curve"
    # catalog
    catalog_seed: int = 2
    num_tables: int = 6
    rows_per_table: int = 2000
    domains: tuple = (2000, 2000, 10, 10)
    correlation: float = 0.9
    initial_fraction: float = 1.0
    data_path: str = ""
    # engine work weights and the native cost model's coefficients
    weight_seqscan: float = 1.0
    weight_hashjoin: float = 1.0
    weight_mergejoin: float = 1.0
    weight_nestedloopjoin: float = 0.1
    # workload
    workload_seed: int = 2
    templates: int = 8
    template_min_tables: int = 3
    template_max_tables: int = 5
    join_columns: tuple = ("c0", "c1")
    filter_columns: tuple = ("c2", "c3")
    filter_prob: float = 0.7
    filter_width_min: float = 0.01
    filter_width_max: float = 0.3
    count: int = 400
    split: int = 300
    workload_path: str = ""
    # explorer
    strategy: str = "heuristic"
    alpha: float = 10.0
    delta: float = 100.0
    max_candidates: int = 50
    random_n: int = 0
    explorer_seed: int = 0
    # comparator
    dim: int = 1
    model_seed: int = 0
    pretrain: bool = True
    pretrain_plans: int = 2000
    pretrain_steps: int = 3000
    pretrain_seed: int = 7
    model_path: str = ""
    # online training
    update_every: int = 25
    steps_per_update: int = 250
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    idle_fraction: float = 1.0
    idle_mode: str = "hash"
    train_seed: int = 0
    # dynamic data
    growth_every: int = 200
    growth_step: float = 0.125
    # ablation grids
    ablation_strategies: tuple = ("heuristic", "random")
    ablation_idle_fractions: tuple = (1.0, 0.5, 0.25, 0.125)
    ablation_dims: tuple = (1, 4)
    # reporting
    regression_threshold: float = 0.0
    top_k: tuple = (1, 5)

    def validate(self) -> None:
        if self.scenario not in SCENARIOS:
            raise InvalidSpecError(f"unknown scenario {self.scenario!r}; expected one of {', '.join(SCENARIOS)}")
        if self.count < 0:
            raise InvalidSpecError("count must be non-negative")
        if self.scenario == "stable" and not 0 <= self.split < self.count:
            raise InvalidSpecError(f"split point {self.split} must lie in [0, count={self.count})")
        if self.strategy not in ("heuristic", "bruteforce", "random"):
            raise InvalidSpecError(f"unknown strategy {self.strategy!r}")
        if self.idle_mode not in ("hash", "prefix"):
            raise InvalidSpecError(f"unknown idle mode {self.idle_mode!r}")
        if self.update_every < 1:
            raise InvalidSpecError("update_every must be at least 1")
        if not 0.0 < self.idle_fraction <= 1.0:
            raise InvalidSpecError("idle_fraction must lie in (0, 1]")
        if self.dim < 1:
            raise InvalidSpecError("dim must be at least 1")

    # -- flat text format ----------------------------------------------------------

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "ScenarioConfig":
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise InvalidSpecError(f"{source}:{lineno}: expected 'key = value'")
            values[key.strip()] = value.strip()
        return cls().with_overrides(values, source)

    @classmethod
    def load(cls, path) -> "ScenarioConfig":
        return cls.from_text(Path(path).read_text(), str(path))

    def with_overrides(self, values: dict, source: str = "<override>") -> "ScenarioConfig":
        known = {f.name: f for f in dataclasses.fields(self)}
        changes = {}
        for key, value in values.items():
            key = key.replace("-", "_")
            if key not in known:
                raise InvalidSpecError(f"{source}: unknown config key {key!r}")
            changes[key] = _coerce(getattr(self, key), value, key)
        cfg = dataclasses.replace(self, **changes)
        cfg.validate()
        return cfg

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            lines.append(f"{f.name} = {_render(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    # -- derived objects -------------------------------------------------------------

    def catalog_spec(self) -> CatalogSpec:
        return CatalogSpec(self.num_tables, self.rows_per_table, tuple(self.domains),
                           self.correlation, self.initial_fraction)

    def weights(self) -> dict[str, float]:
        return {op: float(getattr(self, "weight_" + op.lower())) for op in OPERATORS}

    def explorer(self, strategy: Optional[str] = None) -> ExplorerConfig:
        return ExplorerConfig(strategy or self.strategy, self.alpha, self.delta, self.max_candidates,
                              self.random_n or None, self.explorer_seed)

    def schedule(self, idle_fraction: Optional[float] = None) -> TrainingSchedule:
        return TrainingSchedule(
            update_every=self.update_every,
            idle_fraction=self.idle_fraction if idle_fraction is None else idle_fraction,
            steps_per_update=self.steps_per_update,
            batch_size=self.batch_size,
            lr=self.lr,
            momentum=self.momentum,
            seed=self.train_seed,
            idle_mode=self.idle_mode,
        )


def _coerce(default, text: str, key: str):
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            items = [s.strip() for s in text.split(",") if s.strip()]
            kind = type(default[0]) if default else str
            return tuple(kind(s) for s in items)
        return text
    except ValueError:
        raise InvalidSpecError(f"bad value for {key}: {text!r}") from None


def _render(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_render(v) for v in value)
    if isinstance(value, float):
        return str(int(value)) if value.is_integer() and abs(value) < 1e15 else repr(value)
    return str(value)


# -- building blocks -------------------------------------------------------------------

def build_database(config: ScenarioConfig) -> Database:
    engine = EngineConfig(config.weights())
    if config.data_path:
        catalog, data = read_fixture(config.data_path)
        return Database(catalog, data, config.initial_fraction, engine)
    config.catalog_spec().validate()
    return Database.generate(config.catalog_seed, config.catalog_spec(), engine)


def build_templates(config: ScenarioConfig, db: Database) -> list[Template]:
    return random_templates(
        db.catalog, config.templates, config.workload_seed, config.template_min_tables,
        config.template_max_tables, config.join_columns or None, config.filter_columns or None,
    )


def generate_workload(templates: Sequence[Template], count: int, seed: int, catalog,
                      config: Optional[ScenarioConfig] = None) -> list[Query]:
    """Seeded query stream; ids are unique and follow stream order."""
    config = config or ScenarioConfig()
    if count == 0:
        return []
    return _generate_stream(templates, count, seed, catalog, filter_prob=config.filter_prob,
                            width_range=(config.filter_width_min, config.filter_width_max))


def build_workload(config: ScenarioConfig, db: Database) -> list[Query]:
    if config.workload_path:
        queries = read_workload(config.workload_path)
        for q in queries:
            q.validate(db.catalog)
        return queries
    return generate_workload(build_templates(config, db), config.count, config.workload_seed,
                             db.catalog, config)


def build_model(config: ScenarioConfig, db: Database, *, dim: Optional[int] = None,
                pretrained: Optional[bool] = None) -> ComparatorModel:
    """Pre-trained model, or a cold-start one whose embeddings all tie."""
    dim = config.dim if dim is None else dim
    pretrained = config.pretrain if pretrained is None else pretrained
    if config.model_path and pretrained and dim == 1:
        return ComparatorModel.load(config.model_path)
    mc = ModelConfig(feature_width(len(db.catalog.tables)), dim=dim)
    model = ComparatorModel(mc, table_order=db.catalog.table_names, seed=config.model_seed,
                            cold_start=not pretrained)
    if pretrained:
        if dim != 1:
            raise InvalidSpecError("pre-training needs dim = 1")
        pretrain(model, db.catalog, CostModel(config.weights()), config.pretrain_plans,
                 config.pretrain_seed, _pretrain_config(config))
    return model


def _pretrain_config(config: ScenarioConfig) -> PretrainConfig:
    return PretrainConfig(n_plans=config.pretrain_plans, steps=config.pretrain_steps)


# -- reports ---------------------------------------------------------------------------

@dataclass
class SystemRun:
    """One learned-optimizer variant evaluated over the stream."""

    name: str
    outcomes: list[QueryOutcome]
    idle_fraction: float
    records: int
    updates: int

    @property
    def latencies(self) -> list[float]:
        return [o.decision_latency for o in self.outcomes]

    @property
    def fastest(self) -> list[float]:
        return [o.fastest_latency for o in self.outcomes]


@dataclass
class EvaluationReport:
    config: ScenarioConfig
    query_ids: list[str]
    templates: list[int]
    native: list[float]
    systems: list[SystemRun]
    notes: list[str] = field(default_factory=list)

    def system(self, name: str) -> SystemRun:
        for s in self.systems:
            if s.name == name:
                return s
        raise KeyError(name)

    @property
    def fastest(self) -> list[float]:
        """Fastest candidate of the first system (all systems share it unless strategies differ)."""
        return self.systems[0].fastest if self.systems else []

    def accumulated(self) -> dict[str, list[float]]:
        series = {"native": _running(self.native), "fastest": _running(self.fastest)}
        for s in self.systems:
            series[s.name] = _running(s.latencies)
            if s.fastest != self.fastest:
                series[s.name + ":fastest"] = _running(s.fastest)
        return series

    def totals(self) -> dict[str, float]:
        return {k: (v[-1] if v else 0.0) for k, v in self.accumulated().items()}

    def rank_metrics(self, run: SystemRun) -> dict[int, Optional[float]]:
        return compute_rank_metrics(run.outcomes, self.config.top_k, run.idle_fraction)

    def native_rank_metrics(self) -> dict[int, Optional[float]]:
        run = self.systems[0]
        return compute_rank_metrics(run.outcomes, self.config.top_k, run.idle_fraction,
                                    chosen=self.native)

    def candidate_stats(self, run: SystemRun) -> dict[str, float]:
        counts = np.array([len(o.candidate_latencies) for o in run.outcomes], dtype=float)
        if counts.size == 0:
            return {"min": 0, "mean": 0.0, "median": 0.0, "max": 0}
        return {"min": int(counts.min()), "mean": float(counts.mean()),
                "median": float(np.median(counts)), "max": int(counts.max())}

    def regression_counts(self, run: SystemRun) -> dict[str, int]:
        thr = self.config.regression_threshold
        lat = np.array(run.latencies)
        nat = np.array(self.native)
        return {"regressed": int(np.sum(lat > nat + thr)), "improved": int(np.sum(lat < nat - thr)),
                "unchanged": int(np.sum(np.abs(lat - nat) <= thr))}


def _running(values: Sequence[float]) -> list[float]:
    out, acc = [], 0.0
    for v in values:
        acc += v
        out.append(acc)
    return out


def compute_rank_metrics(outcomes: Sequence[QueryOutcome], ks=(1, 5), idle_fraction: float = 1.0,
                         chosen: Optional[Sequence[float]] = None) -> dict[int, Optional[float]]:
    """Fraction of queries whose chosen plan is among the ``k`` fastest candidates.

    ``chosen`` overrides the evaluated latencies (e.g. the native plan's).
    Unavailable (``None``) unless every candidate was executed, i.e. ``idle_fraction == 1``.
    """
    if idle_fraction < 1.0:
        return {k: None for k in ks}
    if not outcomes:
        return {k: None for k in ks}
    result = {}
    for k in ks:
        hits = 0
        for i, o in enumerate(outcomes):
            lat = o.decision_latency if chosen is None else chosen[i]
            # ties share the better rank, so an optimal choice always counts
            rank = 1 + sum(1 for x in o.candidate_latencies if x < lat)
            hits += rank <= k
        result[k] = hits / len(outcomes)
    return result


# -- orchestration -----------------------------------------------------------------------

class _Fixture:
    """Everything variants of one scenario share: data, workload, caches."""

    def __init__(self, config: ScenarioConfig):
        self.config = config
        self.db = build_database(config)
        self.queries = build_workload(config, self.db)
        self.cost_model = CostModel(config.weights())
        self.candidates: dict = {}
        self._models: dict = {}

    def model(self, dim: int, pretrained: bool) -> ComparatorModel:
        key = (dim, pretrained)
        if key not in self._models:
            self._models[key] = build_model(self.config, self.db, dim=dim, pretrained=pretrained)
        return self._models[key].copy()

    def run(self, name: str, model: ComparatorModel, *, strategy=None, idle_fraction=None,
            freeze_after=None) -> SystemRun:
        cfg = self.config
        if cfg.scenario == "dynamic":
            # every variant replays the same growth schedule from the initial load
            self.db._set_fraction(cfg.initial_fraction)
        stats = Statistics(self.db)
        before = None
        if cfg.scenario == "dynamic":
            def before(t):
                if t > 0 and t % cfg.growth_every == 0:
                    self.db.apply_data_growth(cfg.growth_step)
                    stats.refresh()
        schedule = cfg.schedule(idle_fraction)
        state = LoopState(model)
        outcomes = run_online_loop(
            self.queries, self.db, stats, state, schedule, cfg.explorer(strategy), self.cost_model,
            freeze_after=freeze_after, before_query=before, candidate_cache=self.candidates,
        )
        return SystemRun(name, outcomes, schedule.idle_fraction, len(state.repo), state.version)


def run_scenario(config: ScenarioConfig) -> EvaluationReport:
    """Run one scenario end to end; a pure function of the config."""
    config.validate()
    fx = _Fixture(config)
    sc = config.scenario
    pre = config.pretrain and config.dim == 1
    runs: list[SystemRun] = []
    notes: list[str] = []
    start = 0
    if sc in ("curve", "dynamic"):
        runs.append(fx.run("learned", fx.model(config.dim, pre)))
    elif sc == "stable":
        runs.append(fx.run("learned", fx.model(config.dim, pre), freeze_after=config.split))
        start = config.split
        notes.append(f"model frozen after query {config.split}; rows cover the tail only")
    elif sc == "ablation-pretrain":
        runs.append(fx.run("learned:pretrained", fx.model(1, True)))
        runs.append(fx.run("learned:cold", fx.model(1, False)))
    elif sc == "ablation-strategy":
        for s in config.ablation_strategies:
            runs.append(fx.run(f"learned:{s}", fx.model(config.dim, pre), strategy=s))
    elif sc == "ablation-idle":
        for rho in config.ablation_idle_fractions:
            runs.append(fx.run(f"learned:rho={rho!r}", fx.model(config.dim, pre), idle_fraction=rho))
    elif sc == "ablation-dim":
        # only the scalar embedding can be pre-trained, so every variant starts cold
        for d in config.ablation_dims:
            runs.append(fx.run(f"learned:d={d}", fx.model(int(d), False)))
        notes.append("all dimension variants are cold-started")
    n_fallback = sum(o.fallback for r in runs for o in r.outcomes)
    if n_fallback:
        notes.append(f"{n_fallback} queries fell back to the heuristic explorer")
    native = [o.native_latency for o in runs[0].outcomes]
    for r in runs:
        r.outcomes = r.outcomes[start:]
    notes.append("fastest = fastest executed candidate, not the fastest valid plan")
    return EvaluationReport(
        config,
        [q.id for q in fx.queries[start:]],
        [q.template for q in fx.queries[start:]],
        native[start:],
        runs,
        notes,
    )


# -- report files --------------------------------------------------------------------------

def _fmt(x) -> str:
    if x is None:
        return "unavailable"
    if isinstance(x, float):
        return repr(x)
    return str(x)


def per_query_csv(report: EvaluationReport) -> str:
    header = ["sequence", "query_id", "template", "native", "fastest"]
    for s in report.systems:
        header += [s.name, s.name + ":fastest", s.name + ":candidates", s.name + ":rank",
                   s.name + ":provenance"]
    lines = [",".join(header)]
    offset = report.systems[0].outcomes[0].sequence if report.systems and report.systems[0].outcomes else 0
    for i, qid in enumerate(report.query_ids):
        row = [str(offset + i), qid, str(report.templates[i]), _fmt(report.native[i]),
               _fmt(report.fastest[i])]
        for s in report.systems:
            o = s.outcomes[i]
            row += [_fmt(o.decision_latency), _fmt(o.fastest_latency),
                    str(len(o.candidate_latencies)), str(o.rank()), o.chosen_provenance]
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def accumulated_csv(report: EvaluationReport) -> str:
    series = report.accumulated()
    names = list(series)
    lines = [",".join(["sequence"] + names)]
    offset = report.systems[0].outcomes[0].sequence if report.systems and report.systems[0].outcomes else 0
    for i in range(len(report.query_ids)):
        lines.append(",".join([str(offset + i)] + [_fmt(series[n][i]) for n in names]))
    return "\n".join(lines) + "\n"


def summary_text(report: EvaluationReport) -> str:
    cfg = report.config
    totals = report.totals()
    out = [f"scenario: {cfg.scenario}", f"queries evaluated: {len(report.query_ids)}",
           f"seeds: catalog={cfg.catalog_seed} workload={cfg.workload_seed} model={cfg.model_seed} "
           f"pretrain={cfg.pretrain_seed} train={cfg.train_seed} explorer={cfg.explorer_seed}",
           "", "totals:"]
    native_total = totals["native"]
    for name, total in totals.items():
        ratio = total / native_total if native_total > 0 else math.nan
        out.append(f"  {name}: {_fmt(total)} ({ratio:.4f} x native)")
    out.append("")
    ks = cfg.top_k
    nat = report.native_rank_metrics() if report.systems else {}
    out.append("rank metrics (fraction of queries whose choice is among the k fastest candidates):")
    out.append("  native: " + " ".join(f"P_{k}={_fmt(nat.get(k))}" for k in ks))
    for s in report.systems:
        m = report.rank_metrics(s)
        out.append(f"  {s.name}: " + " ".join(f"P_{k}={_fmt(m[k])}" for k in ks))
    out.append("")
    out.append(f"per-query comparison against native (threshold {_fmt(cfg.regression_threshold)}):")
    for s in report.systems:
        c = report.regression_counts(s)
        out.append(f"  {s.name}: improved={c['improved']} regressed={c['regressed']} "
                   f"unchanged={c['unchanged']}")
    out.append("")
    out.append("candidates per query:")
    for s in report.systems:
        c = report.candidate_stats(s)
        out.append(f"  {s.name}: min={c['min']} mean={c['mean']:.3f} median={c['median']:.1f} "
                   f"max={c['max']} records={s.records} updates={s.updates}")
    if report.notes:
        out.append("")
        out.append("notes:")
        out += [f"  {n}" for n in report.notes]
    out.append("")
    out.append("config:")
    out += ["  " + line for line in cfg.to_text().splitlines()]
    return "\n".join(out) + "\n"


REPORT_FILES = ("queries.csv", "accumulated.csv", "summary.txt")


def emit_report(report: EvaluationReport, path) -> list[Path]:
    """Write the per-query CSV, the accumulated CSV and the text summary into ``path``."""
    d = Path(path)
    try:
        d.mkdir(parents=True, exist_ok=True)
        files = []
        for name, text in zip(REPORT_FILES, (per_query_csv(report), accumulated_csv(report),
                                             summary_text(report))):
            p = d / name
            p.write_text(text)
            files.append(p)
    except OSError as exc:
        raise OSError(f"cannot write report to {d}: {exc.strerror or exc}") from exc
    return files
