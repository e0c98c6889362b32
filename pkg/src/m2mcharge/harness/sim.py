"""Discrete-tick simulation driver.

One tick is one second of simulated time and runs these phases in order:

1. ledger maintenance: funding, attack hooks, scripted stops, background
   traffic, milestones (with a conservation check), channel-open polling
2. bus delivery
3. stations handle their inboxes and prepare the EVSE request
4. feeder allocation, metering and vehicle energy intake
5. stations finish settling
6. bus delivery
7. vehicles handle their inboxes and step their state machines
"""

from __future__ import annotations

import hashlib
import json
import random
import time
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

from .. import channel as chan
from .. import netbus, wallet
from ..adversary import (
    AGENT_ATTACKS,
    AttackKind,
    Interruptor,
    ParasiticChain,
    SubtangleAttack,
    greedy_guest,
    overbilling_host,
)
from ..errors import ConfirmationTimeout, M2MError
from ..ledger import Mode, Status, Tangle, snapshot, transfer
from ..station import MICRO, ChargingStation, StationState, allocate_feeder
from ..vehicle import EAV
from .report import ConservationResult, LedgerStats, RunReport, SessionRecord
from .scenario import Scenario

SUPPLY = 10**15


def _digest_int(*parts) -> int:
    text = "/".join(str(p) for p in parts).encode()
    return int.from_bytes(hashlib.sha256(text).digest()[:8], "big")


def stream(seed: int, name: str) -> random.Random:
    """Independent RNG stream for one subsystem, derived from the scenario seed."""
    return random.Random(_digest_int("rng", seed, name))


@dataclass
class Keys:
    treasury: wallet.KeyPair
    coordinator: wallet.KeyPair
    background: wallet.KeyPair
    attacker: wallet.KeyPair
    merchant: wallet.KeyPair
    accomplice: wallet.KeyPair
    stations: dict[int, wallet.KeyPair]
    vehicles: dict[int, wallet.KeyPair]


def derive_keys(scenario: Scenario) -> Keys:
    """Every key of a run, re-derivable from the scenario alone."""
    seed = scenario.seed

    def kp(role: str, n: int = 0) -> wallet.KeyPair:
        return wallet.derive(_digest_int("key", seed, role, n))

    return Keys(treasury=kp("treasury"), coordinator=kp("coordinator"), background=kp("background"),
                attacker=kp("attacker"), merchant=kp("merchant"), accomplice=kp("accomplice"),
                stations={s.id: kp("station", s.id) for s in scenario.stations},
                vehicles={v.id: kp("vehicle", v.id) for v in scenario.vehicles})


def canonical_line(obj: dict) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


class Simulation:
    """One self-contained world: ledger, bus, agents and logs. Implements ``Services``."""

    def __init__(self, scenario: Scenario):
        self.scenario = scenario
        sc = scenario
        self.keys = derive_keys(sc)
        self.rng_ledger = stream(sc.seed, "ledger")
        self.rng_attack = stream(sc.seed, "attack")
        self.bus = netbus.Bus(latency=sc.bus.latency, drop=sc.bus.drop, rng=stream(sc.seed, "bus"))
        self.tangle = Tangle(self.keys.treasury.address, SUPPLY, difficulty=sc.ledger.difficulty,
                             mode=sc.ledger.mode, k=sc.ledger.k,
                             coordinator=self.keys.coordinator if sc.ledger.mode is Mode.COORDINATOR else None,
                             coordinator_address=self.keys.coordinator.address)
        self.events: list[str] = []
        self.channels: dict[str, chan.FlashChannel] = {}
        self.opening: list[chan.FlashChannel] = []
        self.records: dict[str, SessionRecord] = {}
        self.energy: dict[str, int] = defaultdict(int)
        self.active_by_station: dict[int, str] = {}
        self.conservation = ConservationResult()
        self.violations = 0
        self._nonce = 0
        # the station must not count a payment as missing before it can arrive
        lag = 2 * sc.bus.latency
        self.stations = {s.id: ChargingStation(s.id, self.keys.stations[s.id], location=s.location, tariff=s.tariff,
                                               power_max=s.power_max, feeder=s.feeder,
                                               tariff_schedule=[tuple(x) for x in s.tariff_schedule],
                                               payment_grace=s.payment_grace, payment_lag=lag)
                         for s in sorted(sc.stations, key=lambda s: s.id)}
        self.vehicles = {v.id: EAV(v.id, self.keys.vehicles[v.id], location=v.location,
                                   battery_capacity=v.battery_capacity, battery_level=v.battery_level,
                                   bms_threshold=v.bms_threshold, drain_w=v.drain_w,
                                   accept_tariff_max=v.accept_tariff_max, charge_to=v.charge_to)
                         for v in sorted(sc.vehicles, key=lambda v: v.id)}
        self.feeders = {f.id: f.cap for f in sorted(sc.feeders, key=lambda f: f.id)}
        self.by_feeder: dict[int, list[ChargingStation]] = defaultdict(list)
        for st in self.stations.values():
            self.by_feeder[st.feeder].append(st)
            st.attach(self)
        for ev in self.vehicles.values():
            ev.attach(self)
        self.hooks: list = []
        self.ledger_attack = None
        self._install_attack()

    # -- Services ----------------------------------------------------------

    def log(self, kind: str, tick: int, **fields) -> None:
        if kind == "violation":
            self.violations += 1
            cid = fields.get("channel_id") or self.active_by_station.get(fields.get("station", -1))
            if cid:
                fields["channel_id"] = cid
                rec = self.records.get(cid)
                if rec is not None:
                    rec.violations.append(f"{tick}:{fields.get('by', '')}:{fields.get('reason', '')}")
        self.events.append(canonical_line({"tick": tick, "kind": kind, **fields}))

    def open_channel(self, vehicle_id: int, station_id: int, deposit_each: int, tick: int,
                     tariff: int, target_j: int) -> chan.FlashChannel:
        vk, sk = self.keys.vehicles[vehicle_id], self.keys.stations[station_id]
        self._nonce += 1
        ch = chan.open_channel(self.tangle, vk, sk, deposit_each, self.rng_ledger, tick=tick,
                               timeout=self.scenario.ledger.open_timeout, nonce=self._nonce)
        self.channels[ch.id] = ch
        self.opening.append(ch)
        self.active_by_station[station_id] = ch.id
        st = self.stations[station_id]
        self.records[ch.id] = SessionRecord(
            channel_id=ch.id, vehicle=vehicle_id, station=station_id, tariff=tariff, deposit_each=deposit_each,
            target_j=target_j, power_max=st.power_max, open_tick=tick, vehicle_address=vk.address_hex,
            station_address=sk.address_hex, escrow_address=ch.escrow.address_hex,
            open_bundle=ch.opening_bundle_id.hex())
        self.log("channel_opening", tick, channel_id=ch.id, vehicle=vehicle_id, station=station_id,
                 deposit_each=deposit_each, tariff=tariff, target_j=target_j, bundle=ch.opening_bundle_id.hex())
        return ch

    def close_channel(self, channel: chan.FlashChannel, initiator: str, tick: int, *, forced: bool,
                      reason: str) -> None:
        rec = self.records[channel.id]
        party = self.keys.vehicles[rec.vehicle] if initiator == "vehicle" else self.keys.stations[rec.station]
        try:
            if forced:
                chan.forced_close(channel, self.tangle, party.public, self.rng_ledger, tick)
            else:
                chan.cooperative_close(channel, self.tangle, self.rng_ledger, tick)
        except M2MError as exc:
            self.log("close_failed", tick, channel_id=channel.id, error=str(exc))
            return
        final = channel.latest
        rec.close_tick = tick
        rec.close_bundle = channel.closing_bundle_id.hex()
        rec.close_reason = reason
        rec.initiator = initiator
        rec.forced = forced
        rec.energy_j = self.energy[channel.id]
        rec.owed_tokens = rec.energy_j * rec.tariff // MICRO
        rec.tokens_settled = final.balance_b - channel.deposit_each
        rec.final_seq = final.seq
        if self.active_by_station.get(rec.station) == channel.id:
            del self.active_by_station[rec.station]
        self.log("settled", tick, channel_id=channel.id, vehicle=rec.vehicle, station=rec.station,
                 initiator=initiator, forced=forced, reason=reason, seq=final.seq,
                 payout_vehicle=final.balance_a, payout_station=final.balance_b,
                 bundle=rec.close_bundle)

    def channel(self, channel_id: str) -> chan.FlashChannel | None:
        return self.channels.get(channel_id)

    # -- setup -------------------------------------------------------------

    def _install_attack(self) -> None:
        spec = self.scenario.attack
        if spec is None:
            return
        kind = spec.kind
        if kind in AGENT_ATTACKS:
            vehicle_side = kind in (AttackKind.GREEDY_GUEST, AttackKind.INTERRUPTOR_GUEST)
            pool = self.vehicles if vehicle_side else self.stations
            if spec.target not in pool:
                raise M2MError(f"attack target {spec.target} does not exist")
            agent = pool[spec.target]
            if kind is AttackKind.GREEDY_GUEST:
                greedy_guest(agent, spec.start_tick)
            elif kind is AttackKind.OVERBILLING_HOST:
                overbilling_host(agent, spec.factor_q, spec.start_tick)
            else:
                self.hooks.append(Interruptor(agent, spec.tick))
            return
        k = self.keys
        common = dict(amount=spec.amount, rng=self.rng_attack, start_tick=spec.start_tick, funder=k.treasury)
        if kind is AttackKind.SUBTANGLE:
            self.ledger_attack = SubtangleAttack(self.tangle, k.attacker, k.merchant.address,
                                                 k.accomplice.address, rate=spec.rate, **common)
        else:
            self.ledger_attack = ParasiticChain(self.tangle, k.attacker, k.merchant.address,
                                                k.accomplice.address, attempts=spec.attempts,
                                                rate=max(spec.rate, 1), **common)
        self.hooks.append(self.ledger_attack)

    def _fund(self, tick: int) -> None:
        moves = {}
        for s in sorted(self.scenario.stations, key=lambda s: s.id):
            if s.funds:
                moves[self.keys.stations[s.id].address] = s.funds
        for v in sorted(self.scenario.vehicles, key=lambda v: v.id):
            if v.funds:
                moves[self.keys.vehicles[v.id].address] = v.funds
        if not moves:
            return
        moves = {self.keys.treasury.address: -sum(moves.values()), **moves}
        bundle = transfer(tick, moves, tag=b"funding").sign_with(self.keys.treasury)
        self.tangle.attach_bundle(bundle, self.rng_ledger)
        self.log("funding", tick, bundle=bundle.bundle_id.hex(), total=-moves[self.keys.treasury.address])

    # -- phases ------------------------------------------------------------

    def _check_conservation(self, tick: int) -> None:
        total = self.tangle.confirmed_total()
        self.conservation.checks += 1
        if total != self.tangle.supply:
            self.conservation.ok = False
            self.conservation.failures.append({"tick": tick, "confirmed_total": total})
            self.log("conservation_failure", tick, confirmed_total=total, supply=self.tangle.supply)

    def _ledger_phase(self, tick: int) -> None:
        sc = self.scenario
        if tick == 0:
            self._fund(tick)
            for st in self.stations.values():
                st.advertise(tick)
        for hook in self.hooks:
            try:
                hook.on_tick(tick)
            except M2MError as exc:
                self.log("attack_error", tick, error=str(exc))
        for stop in sc.stops:
            if stop.tick == tick:
                agent = self.vehicles.get(stop.id) if stop.party == "vehicle" else self.stations.get(stop.id)
                if agent is not None:
                    if stop.party == "vehicle":
                        agent.request_stop(tick)
                    else:
                        agent.request_stop()
                    self.log("manual_stop", tick, party=stop.party, id=stop.id)
        for n in range(sc.background_rate):
            self.tangle.attach_data(self.keys.background.address, tick, b"bg:%d:%d" % (tick, n), self.rng_ledger)
        if tick % sc.ledger.milestone_interval == 0:
            if self.tangle.mode is Mode.COORDINATOR:
                ms = self.tangle.issue_milestone(tick=tick)
                self.log("milestone", tick, index=ms.index, tx=ms.tx_id.hex())
            self._check_conservation(tick)
        still = []
        for ch in self.opening:
            if ch.status is chan.ChannelStatus.CLOSED:
                continue
            try:
                if chan.poll_open(ch, self.tangle, tick):
                    self.records[ch.id].opened_tick = tick
                    self.log("channel_open", tick, channel_id=ch.id)
                    continue
            except ConfirmationTimeout:
                ch.status = chan.ChannelStatus.CLOSED
                rec = self.records[ch.id]
                rec.close_reason = "open-timeout"
                self.log("open_timeout", tick, channel_id=ch.id)
                if self.active_by_station.get(rec.station) == ch.id:
                    del self.active_by_station[rec.station]
                continue
            still.append(ch)
        self.opening = still

    def _power_phase(self, tick: int) -> None:
        for fid, stations in self.by_feeder.items():
            alloc = allocate_feeder({st.id: st.evse.requested for st in stations}, self.feeders[fid])
            for st in stations:
                st.evse.apply(alloc[st.id])
                if st.state is not StationState.CHARGING:
                    continue
                s = st.session
                due_before = s.published_due
                delta = st.meter_tick(tick)
                cid = s.channel.id
                self.energy[cid] += delta
                self.log("meter", tick, channel_id=cid, station=st.id, vehicle=s.vehicle_id, delta_j=delta,
                         due_tokens=s.published_due - due_before)
                ev = self.vehicles.get(s.vehicle_id)
                if ev is not None:
                    ev.charge_step(delta, tick)

    def step(self, tick: int) -> None:
        self._ledger_phase(tick)
        self.bus.step(tick)
        for st in self.stations.values():
            st.handle_session(self.bus.drain(st.name), tick)
            st.prepare(tick)
        self._power_phase(tick)
        for st in self.stations.values():
            st.finish(tick)
        self.bus.step(tick)
        for ev in self.vehicles.values():
            ev.step(self.bus.drain(ev.name), tick)

    # -- driver ------------------------------------------------------------

    def run(self) -> RunReport:
        t0 = time.perf_counter()
        for tick in range(self.scenario.ticks):
            self.step(tick)
        end = self.scenario.ticks
        if not self.conservation.checks or (end - 1) % self.scenario.ledger.milestone_interval:
            self._check_conservation(end)
        attack = None
        if self.scenario.attack is not None:
            attack = self._attack_summary()
            self.log("attack", end, report=attack)
        report = self._report(attack)
        report.runtime_s = round(time.perf_counter() - t0, 3)
        return report

    def _attack_summary(self) -> dict:
        spec = self.scenario.attack
        if self.ledger_attack is not None:
            return self.ledger_attack.finish().to_json()
        touched = [r for r in self.records.values()
                   if (r.vehicle if spec.kind in (AttackKind.GREEDY_GUEST, AttackKind.INTERRUPTOR_GUEST)
                       else r.station) == spec.target]
        out = {"kind": spec.kind.value, "start_tick": spec.start_tick, "target": spec.target,
               "sessions": len(touched), "violations": sum(len(r.violations) for r in touched),
               "forced_closes": sum(1 for r in touched if r.forced)}
        for hook in self.hooks:
            if isinstance(hook, Interruptor):
                out.update(tick=hook.tick, fired_tick=hook.fired_tick)
        return out

    def _report(self, attack: dict | None) -> RunReport:
        sc = self.scenario
        t = self.tangle
        for ch in self.channels.values():
            rec = self.records[ch.id]
            if rec.close_bundle is None:
                rec.energy_j = self.energy[ch.id]
                rec.owed_tokens = rec.energy_j * rec.tariff // MICRO
                if ch.states:
                    rec.final_seq = ch.latest.seq
        value_bundles = [bid for bid, slots in t.slots.items() if any(v < 0 for v in slots.values())]
        conflicting = sum(1 for bid in value_bundles if t.bundle_status(bid) is Status.CONFLICTING)
        stats = LedgerStats(tx_count=len(t), bundle_count=len(t.bundle_members), confirmed_count=t.confirmed_count(),
                            conflicting_bundles=conflicting, milestones=len(t.milestones), supply=t.supply,
                            confirmed_total=t.confirmed_total())
        return RunReport(scenario=sc.name, seed=sc.seed, ticks=sc.ticks, mode=t.mode.value,
                         difficulty=t.difficulty, k=t.k, coordinator_address=self.keys.coordinator.address_hex,
                         treasury_address=self.keys.treasury.address_hex,
                         sessions=[self.records[c] for c in self.channels], ledger=stats,
                         conservation=self.conservation, violations=self.violations, attack=attack)

    def audit_lines(self) -> list[str]:
        out = []
        for ch in self.channels.values():
            for st in ch.states:
                rec = st.audit_record(ch.id)
                rec.update(sig_a=st.sig_a.hex(), sig_b=st.sig_b.hex())
                out.append(canonical_line(rec))
        return out

    def write(self, out: str | Path, report: RunReport) -> Path:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "scenario.json").write_text(self.scenario.model_dump_json(indent=1) + "\n")
        (out / "events.jsonl").write_text("".join(line + "\n" for line in self.events))
        (out / "channel_audit.jsonl").write_text("".join(line + "\n" for line in self.audit_lines()))
        snapshot.save(self.tangle, out / "ledger.jsonl")
        report.save(out / "report.json")
        return out


def run(scenario: Scenario, out: str | Path | None = None) -> RunReport:
    """Run ``scenario`` to its horizon; with ``out`` the logs and report are written there."""
    sim = Simulation(scenario)
    report = sim.run()
    if out is not None:
        sim.write(out, report)
    return report
