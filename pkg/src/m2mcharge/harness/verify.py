"""Independent re-check of a finished run from its written artifacts.

Nothing here trusts the simulator's own bookkeeping: settlements are re-derived
from the event log and compared with the ledger snapshot and the channel
audit trail.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

from .. import wallet
from ..channel import state_message
from ..errors import SnapshotError
from ..ledger import Mode, Status, snapshot
from ..station import MICRO, tick_bill_bound
from .report import RunReport
from .scenario import Scenario
from .sim import derive_keys

STRUCTURAL = ("hash", "pow", "parent", "cycle", "bundle", "signature")


@dataclass
class Verdict:
    violations: list[str] = field(default_factory=list)
    checked: dict[str, int] = field(default_factory=lambda: defaultdict(int))

    @property
    def ok(self) -> bool:
        return not self.violations

    def flag(self, kind: str, detail: str) -> None:
        self.violations.append(f"{kind}: {detail}")


def _jsonl(text: str) -> list[dict]:
    return [json.loads(line) for line in text.splitlines() if line.strip()]


def verify_report(report: RunReport, ledger_lines: list[str], events: list[dict], audit: list[dict],
                  scenario: Scenario) -> Verdict:
    """Check every run invariant; the result lists violations (empty means pass)."""
    v = Verdict()
    keys = derive_keys(scenario)  # registers the run's keys so signatures can be checked

    # ledger: structure, proof-of-work, signatures, conservation
    try:
        tangle = snapshot.parse(ledger_lines, difficulty=report.difficulty, mode=report.mode, k=report.k,
                                coordinator_address=bytes.fromhex(report.coordinator_address))
    except SnapshotError as exc:
        v.flag("ledger", str(exc))
        return v
    for tx in tangle.txs:
        bad = tangle.validate_transaction(tx, check_conflict=False)
        v.checked["transactions"] += 1
        if bad is not None and bad.kind in STRUCTURAL:
            v.flag("ledger", f"tx {tx.id.hex()[:12]}.. {bad.kind}: {bad.detail}")
    total = tangle.confirmed_total()
    v.checked["conservation"] += 1
    if total != tangle.supply:
        v.flag("conservation", f"confirmed balances sum to {total}, supply is {tangle.supply}")
    if not report.conservation.ok:
        v.flag("conservation", f"run recorded failures at ticks {[f['tick'] for f in report.conservation.failures]}")
    if tangle.mode is Mode.COORDINATOR and len(tangle.milestones) != report.ledger.milestones:
        v.flag("ledger", f"{len(tangle.milestones)} milestones on ledger, report says {report.ledger.milestones}")

    by_address: dict[bytes, set[bytes]] = defaultdict(set)
    for tx in tangle.txs:
        by_address[tx.address].add(tx.bundle_id)

    # event replay
    energy: dict[str, int] = defaultdict(int)
    metered: dict[str, list[dict]] = defaultdict(list)
    settled: dict[str, dict] = {}
    vehicle_violations: dict[str, list[int]] = defaultdict(list)
    for ev in events:
        kind = ev.get("kind")
        if kind == "meter":
            energy[ev["channel_id"]] += ev["delta_j"]
            metered[ev["channel_id"]].append(ev)
        elif kind == "settled":
            settled[ev["channel_id"]] = ev
        elif kind == "violation" and str(ev.get("by", "")).startswith("vehicle") and "channel_id" in ev:
            vehicle_violations[ev["channel_id"]].append(ev["tick"])

    states: dict[str, list[dict]] = defaultdict(list)
    for rec in audit:
        states[rec["channel_id"]].append(rec)

    exposure_ticks = 1 + 2 * scenario.bus.latency
    for rec in report.sessions:
        cid = rec.channel_id
        v.checked["sessions"] += 1
        total_escrow = 2 * rec.deposit_each
        escrow = bytes.fromhex(rec.escrow_address)
        bound = exposure_ticks * tick_bill_bound(rec.power_max, rec.tariff)

        # channel footprint on the ledger
        touching = by_address.get(escrow, set())
        expected = {bytes.fromhex(rec.open_bundle)}
        if rec.close_bundle:
            expected.add(bytes.fromhex(rec.close_bundle))
        if touching != expected:
            v.flag("footprint", f"channel {cid[:12]}.. has {len(touching)} ledger bundles, expected {len(expected)}")

        # billing replay: one independent accumulator per channel
        e = energy.get(cid, 0)
        owed = e * rec.tariff // MICRO
        if e != rec.energy_j or owed != rec.owed_tokens:
            v.flag("billing", f"channel {cid[:12]}.. report energy/owed {rec.energy_j}/{rec.owed_tokens}, "
                              f"replay {e}/{owed}")
        raw = 0
        billed = 0
        for m in metered.get(cid, []):
            raw += m["delta_j"] * rec.tariff
            honest_due = raw // MICRO - billed
            billed += honest_due
            if m["due_tokens"] > honest_due:
                # with an instant bus the vehicle must object on the very tick of the bill
                seen = [t for t in vehicle_violations.get(cid, [])
                        if t == m["tick"] or (scenario.bus.latency and t >= m["tick"])]
                if not seen:
                    v.flag("threat-B", f"channel {cid[:12]}.. overbilled at tick {m['tick']} without a violation")

        chain = sorted(states.get(cid, []), key=lambda s: s["seq"])
        if not chain:
            v.flag("audit", f"channel {cid[:12]}.. has no signed states")
            continue
        vk, sk = keys.vehicles.get(rec.vehicle), keys.stations.get(rec.station)
        prev = None
        for st in chain:
            v.checked["states"] += 1
            if st["balance_a"] + st["balance_b"] != total_escrow or min(st["balance_a"], st["balance_b"]) < 0:
                v.flag("conservation", f"channel {cid[:12]}.. state {st['seq']} breaks channel conservation")
            if prev is not None and (st["seq"] != prev["seq"] + 1 or st["balance_b"] < prev["balance_b"]):
                v.flag("audit", f"channel {cid[:12]}.. state {st['seq']} does not extend {prev['seq']}")
            msg = state_message(cid, st["seq"], st["balance_a"], st["balance_b"])
            if vk is None or sk is None or not (wallet.verify(vk.public, msg, bytes.fromhex(st["sig_a"]))
                                                and wallet.verify(sk.public, msg, bytes.fromhex(st["sig_b"]))):
                v.flag("audit", f"channel {cid[:12]}.. state {st['seq']} is not dually signed")
            prev = st
        final = chain[-1]

        if not rec.close_bundle:
            continue
        ev = settled.get(cid)
        if ev is None:
            v.flag("settlement", f"channel {cid[:12]}.. closed on the ledger but never logged as settled")
            continue
        pay_v, pay_s = ev["payout_vehicle"], ev["payout_station"]
        if pay_v + pay_s != total_escrow:
            v.flag("conservation", f"channel {cid[:12]}.. settles {pay_v + pay_s} of an escrow of {total_escrow}")
        close_bid = bytes.fromhex(rec.close_bundle)
        slots = tangle.slots.get(close_bid, {})
        on_ledger = (slots.get(bytes.fromhex(rec.vehicle_address), 0), slots.get(bytes.fromhex(rec.station_address), 0))
        if on_ledger != (pay_v, pay_s) or slots.get(escrow) != -total_escrow:
            v.flag("conservation", f"channel {cid[:12]}.. logged payout {(pay_v, pay_s)} != ledger {on_ledger}")
        if (final["balance_a"], final["balance_b"]) != (pay_v, pay_s) or final["seq"] != ev["seq"]:
            v.flag("settlement", f"channel {cid[:12]}.. did not settle its last dually signed state")
        tokens = pay_s - rec.deposit_each
        if tokens != rec.tokens_settled:
            v.flag("settlement", f"channel {cid[:12]}.. report says {rec.tokens_settled} settled, ledger {tokens}")
        if tokens > owed:
            v.flag("billing", f"channel {cid[:12]}.. vehicle paid {tokens} for {owed} tokens of energy")
        if owed - tokens > bound:
            v.flag("exposure", f"channel {cid[:12]}.. {owed - tokens} tokens unpaid, bound {bound}")
        honest = not rec.forced and not rec.violations
        if honest and (tokens != owed or e != rec.target_j):
            v.flag("billing", f"channel {cid[:12]}.. honest session settled {tokens}, owed {owed}, "
                              f"energy {e} of target {rec.target_j}")
        if tangle.bundle_status(close_bid) is Status.CONFLICTING:
            v.flag("settlement", f"channel {cid[:12]}.. settlement bundle conflicts")
    return v


def verify_run(run_dir: str | Path) -> Verdict:
    d = Path(run_dir)
    scenario = Scenario.model_validate_json((d / "scenario.json").read_text())
    report = RunReport.load(d / "report.json")
    ledger_lines = (d / "ledger.jsonl").read_text().splitlines()
    events = _jsonl((d / "events.jsonl").read_text())
    audit = _jsonl((d / "channel_audit.jsonl").read_text())
    return verify_report(report, ledger_lines, events, audit, scenario)
