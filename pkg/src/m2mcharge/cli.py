"""Command line: ``m2mcharge simulate | verify | snapshot``.

Exit codes: 0 pass, 1 invariant violation, 2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .adversary import AttackKind
from .errors import ConfigInvalid, SnapshotError
from .harness.report import RunReport
from .harness.scenario import Scenario, parse_scenario, read_scenario_data
from .harness.sim import Simulation
from .harness.verify import verify_run
from .ledger import Status, snapshot

EXIT_OK, EXIT_VIOLATION, EXIT_CONFIG = 0, 1, 2


def _print_verdict(verdict) -> int:
    for line in verdict.violations:
        print(f"VIOLATION {line}")
    counts = ", ".join(f"{k}={n}" for k, n in sorted(verdict.checked.items()))
    print(f"{'PASS' if verdict.ok else 'FAIL'} ({counts})")
    return EXIT_OK if verdict.ok else EXIT_VIOLATION


def cmd_simulate(args) -> int:
    data = read_scenario_data(args.scenario)
    if not isinstance(data, dict):
        raise ConfigInvalid("<root>", "scenario must be a mapping")
    if args.no_coordinator:
        data["ledger"] = {**(data.get("ledger") or {}), "mode": "coordinator-free"}
    if args.attack:
        prev = data.get("attack") or {}
        data["attack"] = prev if prev.get("kind") == args.attack else {"kind": args.attack}
    scenario = parse_scenario(data, seed=args.seed, ticks=args.ticks)
    out = Path(args.out or f"runs/{scenario.name}-{scenario.seed}")
    sim = Simulation(scenario)
    report = sim.run()
    sim.write(out, report)
    done = sum(1 for s in report.sessions if s.completed)
    print(f"{scenario.name}: {scenario.ticks} ticks, {done}/{len(report.sessions)} sessions settled, "
          f"{report.ledger.tx_count} transactions, {report.violations} protocol violations, "
          f"{report.runtime_s:.2f} s -> {out}")
    if report.attack:
        print("attack: " + json.dumps(report.attack, sort_keys=True))
    return _print_verdict(verify_run(out))


def cmd_verify(args) -> int:
    d = Path(args.run_dir)
    missing = [n for n in ("scenario.json", "report.json", "ledger.jsonl", "events.jsonl", "channel_audit.jsonl")
               if not (d / n).is_file()]
    if missing:
        raise ConfigInvalid(str(d), f"missing {', '.join(missing)}")
    return _print_verdict(verify_run(d))


def cmd_snapshot(args) -> int:
    d = Path(args.run_dir)
    try:
        report = RunReport.load(d / "report.json")
        tangle = snapshot.load(d / "ledger.jsonl", difficulty=report.difficulty, mode=report.mode, k=report.k,
                               coordinator_address=bytes.fromhex(report.coordinator_address))
    except OSError as exc:
        raise ConfigInvalid(str(d), str(exc)) from None
    except SnapshotError as exc:
        print(f"invalid ledger snapshot: {exc}")
        return EXIT_VIOLATION
    statuses = [tangle.confirmation_status(tx.id) for tx in tangle.txs]
    total = tangle.confirmed_total()
    rows = [
        ("mode", tangle.mode.value), ("difficulty", tangle.difficulty), ("transactions", len(tangle)),
        ("bundles", len(tangle.bundle_members)), ("milestones", len(tangle.milestones)),
        ("tips", len(tangle.tips)), ("confirmed", statuses.count(Status.CONFIRMED)),
        ("pending", statuses.count(Status.PENDING)), ("conflicting", statuses.count(Status.CONFLICTING)),
        ("supply", tangle.supply), ("confirmed total", total),
        ("conservation", "ok" if total == tangle.supply else "VIOLATED"),
    ]
    width = max(len(k) for k, _ in rows)
    for k, val in rows:
        print(f"{k:<{width}}  {val}")
    return EXIT_OK if total == tangle.supply else EXIT_VIOLATION


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="m2mcharge", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("simulate", help="run a scenario and verify its artifacts")
    s.add_argument("scenario", help="scenario file (.yaml, .yml or .json)")
    s.add_argument("--seed", type=int, help="override the scenario seed")
    s.add_argument("--ticks", type=int, help="override the horizon")
    s.add_argument("--out", help="output directory (default runs/<name>-<seed>)")
    s.add_argument("--attack", choices=[k.value for k in AttackKind], help="inject an attack with default parameters")
    s.add_argument("--no-coordinator", action="store_true", help="confirm by cumulative weight instead of milestones")
    s.set_defaults(func=cmd_simulate)
    v = sub.add_parser("verify", help="re-check a run directory")
    v.add_argument("run_dir")
    v.set_defaults(func=cmd_verify)
    n = sub.add_parser("snapshot", help="print ledger statistics of a run directory")
    n.add_argument("run_dir")
    n.set_defaults(func=cmd_snapshot)
    sub.add_parser("schema", help="print the scenario JSON schema").set_defaults(
        func=lambda a: print(json.dumps(Scenario.model_json_schema(), indent=1)) or EXIT_OK)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigInvalid as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
