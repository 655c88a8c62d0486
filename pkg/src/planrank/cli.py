"""Command-line entry point: ``planrank <subcommand> ...``."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .engine import write_fixture, write_workload
from .harness import (
    REPORT_FILES,
    SCENARIOS,
    ScenarioConfig,
    build_database,
    build_model,
    build_workload,
    emit_report,
    run_scenario,
)


def _config(args) -> ScenarioConfig:
    cfg = ScenarioConfig.load(args.config) if args.config else ScenarioConfig()
    overrides = {}
    for item in args.set or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise ValueError(f"--set expects key=value, got {item!r}")
        overrides[key.strip()] = value.strip()
    for key in ("scenario", "alpha", "delta", "strategy", "max_candidates"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = str(value)
    return cfg.with_overrides(overrides) if overrides else cfg


def cmd_gen_data(args) -> None:
    db = build_database(_config(args))
    write_fixture(args.out, _full_catalog(db), db.full_data())
    print(f"wrote {args.out}")


def _full_catalog(db):
    from .schema import Catalog, TableDef

    data = db.full_data()
    return Catalog(tuple(TableDef(t.name, t.columns, len(data[t.name])) for t in db.catalog.tables))


def cmd_gen_workload(args) -> None:
    cfg = _config(args)
    queries = build_workload(cfg, build_database(cfg))
    write_workload(args.out, queries)
    print(f"wrote {len(queries)} queries to {args.out}")


def cmd_pretrain(args) -> None:
    cfg = _config(args)
    model = build_model(cfg.with_overrides({"model_path": ""}), build_database(cfg),
                        dim=1, pretrained=True)
    model.save(args.out)
    print(f"wrote {args.out}")


def cmd_run(args) -> None:
    cfg = _config(args)
    report = run_scenario(cfg)
    files = emit_report(report, args.out)
    print((files[-1]).read_text(), end="")


def cmd_report(args) -> None:
    d = Path(args.dir)
    missing = [n for n in REPORT_FILES if not (d / n).exists()]
    if missing:
        raise FileNotFoundError(f"{d} has no {', '.join(missing)}; run 'planrank run' first")
    print((d / "summary.txt").read_text(), end="")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="planrank", description="Learned plan ranking laboratory.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="flat 'key = value' scenario config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config key (repeatable)")

    sp = sub.add_parser("gen-data", help="write the catalog and all tuples as a fixture file")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("gen-workload", help="write the seeded query stream")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_gen_workload)

    sp = sub.add_parser("pretrain", help="pre-train a comparator on native costs and save it")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("run", help="run a scenario and write its report")
    common(sp)
    sp.add_argument("--scenario", choices=SCENARIOS)
    sp.add_argument("--alpha", type=float)
    sp.add_argument("--delta", type=float)
    sp.add_argument("--strategy", choices=("heuristic", "bruteforce", "random"))
    sp.add_argument("--max-candidates", dest="max_candidates", type=int)
    sp.add_argument("--out", required=True, help="report directory")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("report", help="print the summary of a written report")
    sp.add_argument("dir")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except Exception as exc:  # one-line diagnostic, nonzero exit
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"planrank {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
