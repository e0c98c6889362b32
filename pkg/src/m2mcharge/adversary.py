"""Misbehaving agents for the Guest-Host threat scenarios and the two ledger attacks.

Agent attacks are wrappers: they swap a behaviour hook on an otherwise honest
agent, so an attack whose start tick lies beyond the horizon leaves every
trace unchanged. Ledger attacks are driven tick by tick by the simulation and
can also be run standalone through :func:`subtangle_attack` and
:func:`parasitic_chain`.
"""

from __future__ import annotations

import enum
import math
import random
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from . import wallet
from .errors import M2MError
from .ledger import Bundle, Mode, Status, Tangle, data_bundle, transfer
from .station import ChargingStation
from .vehicle import EAV


class AttackKind(str, enum.Enum):
    GREEDY_GUEST = "greedy_guest"
    OVERBILLING_HOST = "overbilling_host"
    INTERRUPTOR_GUEST = "interruptor_guest"
    INTERRUPTOR_HOST = "interruptor_host"
    SUBTANGLE = "subtangle"
    PARASITIC_CHAIN = "parasitic_chain"


AGENT_ATTACKS = {AttackKind.GREEDY_GUEST, AttackKind.OVERBILLING_HOST,
                 AttackKind.INTERRUPTOR_GUEST, AttackKind.INTERRUPTOR_HOST}


class AttackSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: AttackKind
    start_tick: int = Field(0, ge=0)
    target: int = Field(0, ge=0, description="vehicle or station id the attack wraps")
    factor: str = Field("3/2", description="overbilling factor, a decimal or a ratio such as 3/2")
    tick: Optional[int] = Field(None, ge=0, description="interruption tick; defaults to the start tick")
    rate: int = Field(5, ge=0, description="attacker attachments per tick (ledger attacks)")
    attempts: int = Field(100, ge=0, description="re-attachments for the parasitic chain")
    amount: int = Field(1000, gt=0, description="tokens double-spent by ledger attacks")

    @field_validator("factor")
    @classmethod
    def _factor_ok(cls, v: str) -> str:
        try:
            f = Fraction(v)
        except (ValueError, ZeroDivisionError):
            raise ValueError(f"not a number: {v!r}") from None
        if f < 1:
            raise ValueError("overbilling factor must be at least 1")
        return v

    @model_validator(mode="after")
    def _tick_default(self) -> "AttackSpec":
        if self.tick is None:
            self.tick = self.start_tick
        return self

    @property
    def factor_q(self) -> Fraction:
        return Fraction(self.factor)

    def check_horizon(self, ticks: int) -> None:
        if self.kind in (AttackKind.INTERRUPTOR_GUEST, AttackKind.INTERRUPTOR_HOST) and self.tick >= ticks:
            raise ValueError(f"interruption tick {self.tick} outside the horizon of {ticks} ticks")


# -- Guest-Host agent attacks ------------------------------------------------

@dataclass
class GreedyPayer:
    start_tick: int

    def should_pay(self, tick: int) -> bool:
        return tick < self.start_tick


@dataclass
class OverBilling:
    factor: Fraction
    start_tick: int
    inflated_ticks: list[int] = field(default_factory=list)

    def adjust_due(self, due: int, tick: int) -> int:
        if tick < self.start_tick:
            return due
        out = math.ceil(due * self.factor)
        if out != due:
            self.inflated_ticks.append(tick)
        return out


def greedy_guest(vehicle: EAV, start_tick: int = 0) -> EAV:
    """Honest until ``start_tick``, then keeps drawing energy without paying."""
    vehicle.behavior = GreedyPayer(start_tick)
    return vehicle


def overbilling_host(station: ChargingStation, factor: Fraction | str | float, start_tick: int = 0) -> ChargingStation:
    """Inflate every bill from ``start_tick`` on by ``factor`` (rounded up)."""
    q = Fraction(str(factor)) if isinstance(factor, float) else Fraction(factor)
    if q < 1:
        raise ValueError("overbilling factor must be at least 1")
    station.behavior = OverBilling(q, start_tick)
    return station


@dataclass
class Interruptor:
    """Forces a unilateral close of the agent's open channel at a given tick.

    Armed from ``tick``; if no channel is open then, it fires at the first
    later tick that has one.
    """

    agent: EAV | ChargingStation
    tick: int
    fired_tick: Optional[int] = None

    @property
    def fired(self) -> bool:
        return self.fired_tick is not None

    def on_tick(self, tick: int) -> None:
        if self.fired or tick < self.tick:
            return
        if self.agent.force_close(tick, "interrupted"):
            self.fired_tick = tick


def interruptor(agent: EAV | ChargingStation, tick: int) -> Interruptor:
    return Interruptor(agent, tick)


# -- ledger attacks ----------------------------------------------------------

@dataclass
class AttackReport:
    kind: str
    mode: str
    start_tick: int
    rate: int = 0
    attempts: int = 0
    attached: int = 0
    conflict_bundle: str = ""
    payment_bundle: str = ""
    fork_tick: Optional[int] = None
    confirmed_tick: Optional[int] = None
    confirmations: int = 0
    payment_reverted: bool = False
    final_status: str = ""
    notes: list[str] = field(default_factory=list)

    @property
    def malicious_confirmed(self) -> bool:
        return self.confirmed_tick is not None

    def to_json(self) -> dict:
        return {"kind": self.kind, "mode": self.mode, "start_tick": self.start_tick, "rate": self.rate,
                "attempts": self.attempts, "attached": self.attached, "conflict_bundle": self.conflict_bundle,
                "payment_bundle": self.payment_bundle, "fork_tick": self.fork_tick,
                "confirmed_tick": self.confirmed_tick, "confirmations": self.confirmations,
                "malicious_confirmed": self.malicious_confirmed, "payment_reverted": self.payment_reverted,
                "final_status": self.final_status, "notes": list(self.notes)}


class _LedgerAttack:
    """Shared life cycle: get funded, pay a merchant, then try to undo the payment."""

    kind = ""

    def __init__(self, tangle: Tangle, attacker: wallet.KeyPair, merchant: bytes, accomplice: bytes,
                 *, amount: int, rng: random.Random, start_tick: int = 0,
                 funder: wallet.KeyPair | None = None):
        self.tangle = tangle
        self.attacker = attacker
        self.merchant = merchant
        self.accomplice = accomplice
        self.amount = amount
        self.rng = rng
        self.start_tick = start_tick
        self.funder = funder
        self.phase = "idle"
        self.fund_ids: list[bytes] = []
        self.pay_bid: bytes | None = None
        self.pre_pay = 0
        self.conflict_bid: bytes | None = None
        self.seen_confirmed: set[bytes] = set()
        self.report = AttackReport(kind=self.kind, mode=tangle.mode.value, start_tick=start_tick)

    def _status(self, bid: bytes) -> Status:
        return self.tangle.bundle_status(bid)

    def _fund(self, tick: int) -> None:
        if self.funder is not None:
            b = transfer(tick, {self.funder.address: -self.amount, self.attacker.address: self.amount},
                         tag=b"attack-fund").sign_with(self.funder)
            self.fund_ids = self.tangle.attach_bundle(b, self.rng)
            self.phase = "funding"
        else:
            self.phase = "funded"

    def _conflict_bundle(self, tick: int) -> Bundle:
        b = transfer(tick, {self.attacker.address: -self.amount, self.accomplice: self.amount},
                     tag=b"double-spend")
        return b.sign_with(self.attacker)

    def _pay(self, tick: int) -> None:
        b = transfer(tick, {self.attacker.address: -self.amount, self.merchant: self.amount},
                     tag=b"merchant").sign_with(self.attacker)
        self.pre_pay = len(self.tangle)
        self.tangle.attach_bundle(b, self.rng)
        self.pay_bid = b.bundle_id
        self.report.payment_bundle = b.bundle_id.hex()

    def on_tick(self, tick: int) -> None:
        if tick < self.start_tick:
            return
        if self.phase == "idle":
            self._fund(tick)
        if self.phase == "funding" and self.tangle.spendable(self.attacker.address) >= self.amount:
            self.phase = "funded"
        if self.phase == "funded" and self.tangle.spendable(self.attacker.address) >= self.amount:
            self._pay(tick)
            self.phase = "paid"
            self._after_pay(tick)
        elif self.phase in ("paid", "attacking"):
            self._advance(tick)
        self._observe(tick)

    def _after_pay(self, tick: int) -> None:
        pass

    def _advance(self, tick: int) -> None:
        pass

    def _observe(self, tick: int) -> None:
        if self.conflict_bid is None:
            return
        st = self._status(self.conflict_bid)
        if st is Status.CONFIRMED and self.report.confirmed_tick is None:
            self.report.confirmed_tick = tick
        if self.pay_bid is not None and self._status(self.pay_bid) is not Status.CONFIRMED \
                and st is Status.CONFIRMED:
            self.report.payment_reverted = True
        self.report.final_status = st.value
        # every attached copy of the conflicting bundle that ever got confirmed
        t = self.tangle
        for i in t.bundle_members[self.conflict_bid]:
            tx = t.txs[i]
            if tx.id not in self.seen_confirmed and t.is_confirmed(tx.id):
                self.seen_confirmed.add(tx.id)
        self.report.confirmations = len(self.seen_confirmed)

    def finish(self) -> AttackReport:
        if self.conflict_bid is not None:
            self.report.final_status = self._status(self.conflict_bid).value
        elif self.phase != "idle":
            self.report.notes.append(f"attack stopped in phase {self.phase}")
        return self.report


class SubtangleAttack(_LedgerAttack):
    """Double-spend hung off a pre-payment fork point, then grown at ``rate`` tx/tick.

    The attacker's own transactions only ever approve the attacker's cone, so
    the malicious branch gains weight exactly as fast as the attacker attaches.
    """

    kind = AttackKind.SUBTANGLE.value

    def __init__(self, *args, rate: int = 5, **kw):
        super().__init__(*args, **kw)
        self.rate = rate
        self.report.rate = rate
        self.own_tips: list[bytes] = []
        self.counter = 0

    def _fork_parents(self) -> tuple[bytes, bytes]:
        """Earliest pre-payment transaction whose cone holds the attacker's whole funding bundle."""
        t = self.tangle
        credit = [i for i, tx in enumerate(t.txs[:self.pre_pay]) if tx.address == self.attacker.address and tx.value > 0
                  and t.is_confirmed(tx.id)]
        if not credit:
            raise M2MError("attacker has no confirmed credit to fork from")
        members = t.bundle_members[t.txs[credit[-1]].bundle_id]
        mask = 0
        for i in members:
            mask |= 1 << i
        for i in range(max(members), self.pre_pay):
            if t.cones[i] & mask == mask:
                return t.txs[i].id, t.txs[i].id
        a, b = members[0], members[-1]
        return t.txs[a].id, t.txs[b].id

    def _after_pay(self, tick: int) -> None:
        bundle = self._conflict_bundle(tick)
        trunk, branch = self._fork_parents()
        ids = self.tangle.attach_raw(bundle, [(trunk, branch)] * len(bundle.entries))
        self.conflict_bid = bundle.bundle_id
        self.report.conflict_bundle = bundle.bundle_id.hex()
        self.report.fork_tick = tick
        self.report.attached += len(ids)
        self.own_tips = list(ids)
        self.phase = "attacking"

    def _advance(self, tick: int) -> None:
        for _ in range(self.rate):
            self.counter += 1
            a = self.own_tips[-1]
            b = self.own_tips[-2] if len(self.own_tips) > 1 else a
            bundle = data_bundle(tick, self.attacker.address, b"subtangle:%d" % self.counter)
            self.own_tips.extend(self.tangle.attach_raw(bundle, [(a, b)]))
            self.own_tips = self.own_tips[-2:]
            self.report.attached += 1


class ParasiticChain(_LedgerAttack):
    """Re-attach a rejected double-spend on fresh tips, ``rate`` attempts per tick."""

    kind = AttackKind.PARASITIC_CHAIN.value

    def __init__(self, *args, attempts: int = 100, rate: int = 5, **kw):
        super().__init__(*args, **kw)
        self.attempts = attempts
        self.rate = rate
        self.report.rate = rate
        self.bundle: Bundle | None = None

    def _advance(self, tick: int) -> None:
        if self.report.attempts >= self.attempts:
            return
        if self.bundle is None:
            # wait until the honest payment is final, so the double-spend is rejected
            if self._status(self.pay_bid) is not Status.CONFIRMED:
                return
            self.bundle = self._conflict_bundle(tick)
            self.conflict_bid = self.bundle.bundle_id
            self.report.conflict_bundle = self.conflict_bid.hex()
            self.report.fork_tick = tick
            self.phase = "attacking"
        for _ in range(min(self.rate, self.attempts - self.report.attempts)):
            parents = [self.tangle.select_tips(self.rng) for _ in self.bundle.entries]
            self.tangle.attach_raw(self.bundle, parents)
            self.report.attempts += 1
            self.report.attached += len(parents)

    def finish(self) -> AttackReport:
        if self.attempts == 0:
            return self.report  # nothing was attempted, so there is nothing to report
        return super().finish()


def _drive(attack: _LedgerAttack, ticks: int, honest_rate: int, rng: random.Random,
           milestone_every: int, honest: wallet.KeyPair) -> AttackReport:
    t = attack.tangle
    for tick in range(ticks):
        attack.on_tick(tick)
        for n in range(honest_rate):
            t.attach_data(honest.address, tick, b"honest:%d:%d" % (tick, n), rng)
        if t.mode is Mode.COORDINATOR and tick % milestone_every == milestone_every - 1:
            t.issue_milestone(tick=tick)
        attack._observe(tick)
    return attack.finish()


def subtangle_attack(tangle: Tangle, attacker: wallet.KeyPair, rate: int, *, ticks: int = 60,
                     honest_rate: int = 1, amount: int | None = None, seed: int = 0,
                     milestone_every: int = 10) -> AttackReport:
    """Standalone sub-tangle attack against ``tangle``; the attacker must hold confirmed funds."""
    amount = amount or tangle.balance(attacker.address)
    if amount <= 0 or tangle.spendable(attacker.address) < amount:
        raise M2MError("attacker holds no confirmed funds")
    rng = random.Random(seed)
    merchant, accomplice, honest = (wallet.derive(seed * 4 + n + 1_000_001) for n in range(3))
    attack = SubtangleAttack(tangle, attacker, merchant.address, accomplice.address, amount=amount,
                             rng=rng, rate=rate)
    return _drive(attack, ticks, honest_rate, rng, milestone_every, honest)


def parasitic_chain(tangle: Tangle, attacker: wallet.KeyPair, attempts: int, *, rate: int = 5,
                    ticks: int | None = None, honest_rate: int = 1, amount: int | None = None,
                    seed: int = 0, milestone_every: int = 10) -> AttackReport:
    """Standalone parasitic-chain attack: the rejected double-spend is re-attached ``attempts`` times."""
    amount = amount or tangle.balance(attacker.address)
    if amount <= 0 or tangle.spendable(attacker.address) < amount:
        raise M2MError("attacker holds no confirmed funds")
    rng = random.Random(seed)
    merchant, accomplice, honest = (wallet.derive(seed * 4 + n + 2_000_001) for n in range(3))
    attack = ParasiticChain(tangle, attacker, merchant.address, accomplice.address, amount=amount,
                            rng=rng, attempts=attempts, rate=max(rate, 1))
    if ticks is None:
        ticks = 3 * milestone_every + -(-attempts // max(rate, 1)) + milestone_every
    return _drive(attack, ticks, honest_rate, rng, milestone_every, honest)
