"""Command line entry point: ``run``, ``matrix``, ``replay``, ``validate``."""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .config import VARIANTS, ScenarioConfig, load_config
from .events import read_log, write_log
from .harness import (check_scheduler, compute_metrics, expand_matrix, result_row,
                      rows_to_csv, run_matrix, run_scenario, summary_table)
from .world import ConfigError


def _int_list(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x]


def _base_config(args) -> ScenarioConfig:
    cfg = load_config(args.config) if args.config else ScenarioConfig()
    changes = {}
    if getattr(args, "transport", None):
        changes["transport"] = args.transport
    if getattr(args, "scheduler", None):
        changes["scheduler"] = args.scheduler
    return replace(cfg, **changes)


def _cmd_run(args) -> int:
    cfg = _base_config(args)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.devices is not None:
        changes["devices"] = args.devices
    if args.variant is not None:
        changes["variant"] = args.variant
    cfg = replace(cfg, **changes).check()
    res = run_scenario(cfg)
    row = result_row(cfg, res.metrics)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_log(res.events, out / "events.jsonl")
    (out / "metrics.csv").write_text(rows_to_csv([row]), encoding="utf-8")
    print(summary_table([row]))
    return 0


def _cmd_matrix(args) -> int:
    base = _base_config(args)
    variants = args.variants.split(",") if args.variants else [args.variant or base.variant]
    devices = _int_list(args.devices) if args.devices else [base.devices]
    seeds = _int_list(args.seeds) if args.seeds else (
        [args.seed] if args.seed is not None else [base.seed])
    configs = [c.check() for c in expand_matrix(base, variants, devices, seeds)]
    rows, results = run_matrix(configs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "matrix.csv").write_text(rows_to_csv(rows), encoding="utf-8")
    if args.logs:
        for res in results:
            c = res.config
            write_log(res.events, out / f"events_{c.variant}_n{c.devices}_s{c.seed}.jsonl")
    print(summary_table(rows))
    failed = [r for r in rows if r["error"]]
    if failed:
        print(f"{len(failed)} run(s) failed; see the error column", file=sys.stderr)
        return 1
    return 0


def _cmd_replay(args) -> int:
    events = read_log(args.log)
    cfg = load_config(args.config) if args.config else None
    report = compute_metrics(events, cfg)
    print(json.dumps(report.scalars(), sort_keys=True, indent=2))
    problems = check_scheduler(events)
    for p in problems:
        print(f"scheduler violation: {p}", file=sys.stderr)
    return 1 if problems else 0


def _cmd_validate(args) -> int:
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(exc, file=sys.stderr)
        return 2
    print(f"ok: {cfg.variant}, {cfg.devices} device(s), {len(cfg.domains)} domains")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="edgeadapt", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, devices_type=int):
        sp.add_argument("--config", help="scenario JSON file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--devices", type=devices_type)
        sp.add_argument("--variant", choices=VARIANTS)
        sp.add_argument("--out", default="out")
        sp.add_argument("--transport", choices=("sim", "socket"))
        sp.add_argument("--scheduler", choices=("auto", "mlq", "fifo"))

    run = sub.add_parser("run", help="run one scenario")
    common(run)
    run.set_defaults(fn=_cmd_run)

    matrix = sub.add_parser("matrix", help="run a variant x devices x seeds grid")
    common(matrix, devices_type=str)
    matrix.add_argument("--variants", help="comma-separated variant names")
    matrix.add_argument("--seeds", help="comma-separated seeds")
    matrix.add_argument("--logs", action="store_true", help="also write every event log")
    matrix.set_defaults(fn=_cmd_matrix)

    replay = sub.add_parser("replay", help="recompute metrics from an event log")
    replay.add_argument("log")
    replay.add_argument("--config")
    replay.set_defaults(fn=_cmd_replay)

    validate = sub.add_parser("validate", help="check a scenario file")
    validate.add_argument("--config", required=True)
    validate.set_defaults(fn=_cmd_validate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(exc, file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
