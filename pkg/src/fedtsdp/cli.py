"""Command line: ``fedtsdp run``, ``fedtsdp export``, ``fedtsdp defaults``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .config import ConfigParseError, ExperimentConfig, apply_overrides, parse_config, serialize
from .orchestrator import run_experiment

log = logging.getLogger("fedtsdp")


class AlignmentError(ValueError):
    pass


def _dumps(record) -> str:
    return json.dumps(record, separators=(",", ":"), allow_nan=False)


def execute(cfg: ExperimentConfig, out_path) -> dict:
    """Run one experiment, streaming one JSON line per round, then a summary line."""
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with out_path.open("w", encoding="utf-8", newline="\n") as fh:
        def emit(rec):
            fh.write(_dumps(rec) + "\n")
            log.info("round %d  H=%s  J'=%d  acc=%.4f", rec["round"], rec["hopkins_H"],
                     rec["cluster_count"], rec["weighted_accuracy"])

        history, state, clients = run_experiment(cfg.fed, cfg.train, cfg.data, cfg.hidden, cfg.seed,
                                                 timing=cfg.record_timing, on_round=emit)
        summary = {
            "summary": True,
            "strategy": cfg.fed.strategy,
            "seed": cfg.seed,
            "rounds": len(history),
            "client_concepts": [c.concept for c in clients],
            "final_clusters": [list(map(int, g)) for g in state.assignment.second_stage],
            "final_shared_counts": [float(s) for s in state.shared_counts],
            "gate_fired_rounds": [r["round"] for r in history if r["gate_fired"]],
            "final_weighted_accuracy": history[-1]["weighted_accuracy"] if history else None,
        }
        fh.write(_dumps(summary) + "\n")
    return summary


def read_log(path) -> list[dict]:
    records = []
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                if not rec.get("summary"):
                    records.append(rec)
    return records


def scalar_fields(records) -> list[str]:
    names = []
    for rec in records:
        for k, v in rec.items():
            if k != "round" and k not in names and (v is None or isinstance(v, (int, float, bool))):
                names.append(k)
    return names


def export_plot_data(paths, out_path) -> list[str]:
    """Wide CSV: round, then <run>:<metric> for every scalar metric of every log."""
    logs = [read_log(p) for p in paths]
    if not logs:
        raise AlignmentError("no logs given")
    axis = [r["round"] for r in logs[0]]
    for p, recs in zip(paths, logs):
        if [r["round"] for r in recs] != axis:
            raise AlignmentError(f"{p}: round axis differs from {paths[0]}")
    names, columns = [], []
    for p, recs in zip(paths, logs):
        run = Path(p).stem
        while run in names:
            run += "_"
        names.append(run)
        for metric in scalar_fields(recs):
            columns.append((f"{run}:{metric}", [r.get(metric) for r in recs]))
    header = ["round"] + [c for c, _ in columns]
    with Path(out_path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i, rnd in enumerate(axis):
            w.writerow([rnd] + ["" if vals[i] is None else vals[i] for _, vals in columns])
    return header


def _error(exc, code) -> int:
    print(_dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="fedtsdp", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run one experiment from an INI config")
    run_p.add_argument("config")
    run_p.add_argument("--seed", type=int)
    run_p.add_argument("--strategy", choices=["fedtsd", "fedavg", "fedprox", "fedper"])
    run_p.add_argument("--out", help="metrics JSONL path (overrides [output] path)")
    run_p.add_argument("--override", action="append", default=[], metavar="SECTION.KEY=VALUE")

    exp_p = sub.add_parser("export", help="merge metric logs into a wide CSV table")
    exp_p.add_argument("logs", nargs="+")
    exp_p.add_argument("--out", required=True)

    sub.add_parser("defaults", help="print the default config")

    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")

    if args.command == "defaults":
        sys.stdout.write(serialize(ExperimentConfig()))
        return 0

    if args.command == "export":
        try:
            export_plot_data(args.logs, args.out)
        except (OSError, ValueError, KeyError) as exc:
            return _error(exc, 1)
        return 0

    try:
        cfg = parse_config(args.config)
        overrides = list(args.override)
        if args.seed is not None:
            overrides.append(f"federation.seed={args.seed}")
        if args.strategy:
            overrides.append(f"federation.strategy={args.strategy}")
        cfg = apply_overrides(cfg, overrides)
        if args.out:
            cfg = replace(cfg, output=args.out)
        if not cfg.output:
            raise ConfigParseError("no output path: set [output] path or pass --out")
    except ConfigParseError as exc:
        return _error(exc, 2)
    try:
        execute(cfg, cfg.output)
    except Exception as exc:  # noqa: BLE001 - reported as a machine-readable record
        return _error(exc, 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
