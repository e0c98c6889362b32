"""Charging station: kWh meter, EVSE control, billing and the session protocol."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

from . import netbus, wallet
from .agents import Services
from .channel import ChannelState, ChannelStatus, FlashChannel, countersign
from .errors import ChannelError, M2MError, NotCharging

log = logging.getLogger(__name__)

MICRO = 1_000_000  # tariff is tokens per MJ, energy is in J


class StationState(str, enum.Enum):
    IDLE = "Idle"
    AUTHENTICATING = "Authenticating"
    CHANNEL_OPEN = "ChannelOpen"
    CHARGING = "Charging"
    SETTLING = "Settling"


_ORDER = list(StationState)


def _allowed(src: StationState, dst: StationState) -> bool:
    # forward along the cycle, or tear down from any active state into Settling
    nxt = _ORDER[(_ORDER.index(src) + 1) % len(_ORDER)]
    return dst is nxt or (dst is StationState.SETTLING and src is not StationState.IDLE)


@dataclass
class KwhMeter:
    cumulative_energy: int = 0
    last_tick_delta: int = 0

    def record(self, delta: int) -> None:
        if delta < 0:
            raise ValueError("energy delta must be non-negative")
        self.last_tick_delta = delta
        self.cumulative_energy += delta


@dataclass
class EvseController:
    power_max: int
    requested: int = 0
    setpoint: int = 0

    def apply(self, allocation: int) -> int:
        self.setpoint = max(0, min(self.requested, self.power_max, allocation))
        return self.setpoint


@dataclass
class BillingAccumulator:
    """Exact integer billing: ``billed_total * 10**6 + carry == sum(delta * tariff)``."""

    owed_raw: int = 0
    billed_total: int = 0

    @property
    def carry(self) -> int:
        return self.owed_raw - self.billed_total * MICRO

    def bill(self, delta: int, tariff: int) -> int:
        if tariff < 0 or delta < 0:
            raise ValueError("tariff and delta must be non-negative")
        self.owed_raw += delta * tariff
        due = self.owed_raw // MICRO - self.billed_total
        self.billed_total += due
        return due


def bill_tick(acc: BillingAccumulator, delta: int, tariff: int) -> int:
    return acc.bill(delta, tariff)


def tick_bill_bound(power_w: int, tariff: int) -> int:
    """Largest token amount a single one-second tick at ``power_w`` can bill."""
    return -(-power_w * tariff // MICRO)


def allocate_feeder(requests: dict[int, int], cap: int) -> dict[int, int]:
    """Water-filling split of a feeder's capacity.

    Stations asking for less than an equal share keep their request; the rest
    share what remains equally. Integer leftovers go to the lowest station ids.
    """
    if any(r < 0 for r in requests.values()) or cap < 0:
        raise ValueError("requests and cap must be non-negative")
    if sum(requests.values()) <= cap:
        return dict(requests)
    out: dict[int, int] = {}
    remaining = cap
    todo = sorted(requests, key=lambda s: (requests[s], s))
    while todo:
        share = remaining // len(todo)
        sid = todo[0]
        if requests[sid] <= share:
            out[sid] = requests[sid]
            remaining -= requests[sid]
            todo.pop(0)
            continue
        extra = remaining - share * len(todo)
        for n, s in enumerate(sorted(todo)):
            out[s] = share + (1 if n < extra else 0)
        break
    return {s: out[s] for s in requests}


@dataclass
class HonestBilling:
    """Station-side behaviour hook; adversaries replace it."""

    def adjust_due(self, due: int, tick: int) -> int:
        return due


@dataclass
class StationSession:
    id: str
    vehicle_id: int
    vehicle_public: bytes
    tariff: int
    start_tick: int
    channel: FlashChannel | None = None
    target_j: int = 0
    meter_start: int = 0
    acc: BillingAccumulator = field(default_factory=BillingAccumulator)
    published_due: int = 0
    stop_requested: bool = False
    unpaid_ticks: int = 0
    paused: bool = False
    closing_reason: str = ""
    pay_sub: int | None = None

    def paid(self) -> int:
        if self.channel is None:
            return 0
        return self.channel.latest.balance_b - self.channel.deposit_each


class ChargingStation:
    def __init__(self, station_id: int, keys: wallet.KeyPair, *, location: tuple[float, float], tariff: int,
                 power_max: int, feeder: int = 0, tariff_schedule: list[tuple[int, int]] | None = None,
                 payment_grace: int = 3, payment_lag: int = 0):
        self.id = station_id
        self.keys = keys
        self.location = location
        self.tariff = tariff
        self.tariff_schedule = sorted(tariff_schedule or [])
        self.power_max = power_max
        self.feeder = feeder
        self.state = StationState.IDLE
        self.meter = KwhMeter()
        self.evse = EvseController(power_max)
        self.session: StationSession | None = None
        self.behavior = HonestBilling()
        self.payment_grace = payment_grace
        self.payment_lag = payment_lag
        self.services: Services | None = None
        self.name = f"cs{station_id}"

    def __repr__(self) -> str:
        return f"ChargingStation({self.id}, {self.state.value})"

    # -- wiring ------------------------------------------------------------

    def attach(self, services: Services) -> None:
        self.services = services
        services.bus.subscribe(self.name, "ev/+/demand")

    @property
    def bus(self) -> netbus.Bus:
        return self.services.bus

    def tariff_at(self, tick: int) -> int:
        price = self.tariff
        for start, value in self.tariff_schedule:
            if start <= tick:
                price = value
        return price

    def _goto(self, state: StationState, tick: int) -> None:
        if not _allowed(self.state, state):
            raise M2MError(f"illegal station transition {self.state.value} -> {state.value}")
        prev = self.state
        self.state = state
        if StationState.IDLE in (prev, state):
            self.advertise(tick)

    def advertise(self, tick: int) -> None:
        self.bus.send(self.name, netbus.topic_advert(self.id), {
            "station_id": self.id,
            "address": self.keys.address_hex,
            "tariff_tokens_per_MJ": self.tariff_at(tick),
            "power_max_w": self.power_max,
            "location": list(self.location),
            "available": self.state is StationState.IDLE,
        }, tick)

    def _reply(self, vehicle_id: int, payload: dict, tick: int) -> None:
        self.bus.send(self.name, netbus.topic_bill(self.id, vehicle_id), payload, tick)

    def _violation(self, vehicle_id: int, reason: str, tick: int) -> None:
        self._reply(vehicle_id, {"type": "violation", "station_id": self.id, "reason": reason}, tick)
        self.services.log("violation", tick, by=f"station:{self.id}", vehicle=vehicle_id, station=self.id,
                          reason=reason)

    # -- protocol ----------------------------------------------------------

    def handle_session(self, messages: list[netbus.Envelope], tick: int) -> None:
        """Apply inbound protocol messages to the session state machine."""
        for env in messages:
            try:
                msg = env.json()
            except ValueError:
                continue
            if env.topic.endswith("/pay"):
                self._on_pay(msg, tick)
            elif msg.get("station_id") == self.id:
                self._on_demand(msg, tick)

    def _on_demand(self, msg: dict, tick: int) -> None:
        kind = msg.get("type")
        vid = msg.get("vehicle_id")
        s = self.session
        if kind == "hello":
            if self.state is not StationState.IDLE:
                self._reply(vid, {"type": "busy", "station_id": self.id}, tick)
                return
            self.session = StationSession(id=f"s{self.id}-v{vid}-t{tick}", vehicle_id=vid,
                                          vehicle_public=bytes.fromhex(msg["public_key"]),
                                          tariff=self.tariff_at(tick), start_tick=tick,
                                          meter_start=self.meter.cumulative_energy)
            self._goto(StationState.AUTHENTICATING, tick)
            self._reply(vid, {"type": "accept", "station_id": self.id, "address": self.keys.address_hex,
                              "public_key": self.keys.public.hex(), "session": self.session.id,
                              "tariff_tokens_per_MJ": self.session.tariff, "power_max_w": self.power_max}, tick)
            return
        if s is None or s.vehicle_id != vid:
            if kind in ("stop", "abort"):
                return  # late teardown message from a session that already ended
            self._violation(vid, f"{kind} without authenticated session", tick)
            return
        if kind == "abort" and self.state is StationState.AUTHENTICATING and s.channel is None:
            self._teardown(tick)
        elif kind == "open" and self.state is StationState.AUTHENTICATING and s.channel is None:
            try:
                s.channel = self.services.open_channel(vid, self.id, int(msg["deposit_each"]), tick,
                                                       s.tariff, int(msg.get("target_energy_j", 0)))
            except M2MError as exc:
                self._reply(vid, {"type": "rejected", "station_id": self.id, "reason": str(exc)}, tick)
                self._teardown(tick)
                return
            s.pay_sub = self.bus.subscribe(self.name, netbus.topic_pay(vid))
            self._reply(vid, {"type": "channel_opening", "station_id": self.id, "channel_id": s.channel.id}, tick)
        elif kind == "demand" and self.state is StationState.CHANNEL_OPEN:
            s.target_j = int(msg["target_energy_j"])
            if int(msg.get("accept_tariff_max", s.tariff)) < s.tariff:
                self._violation(vid, "demand refuses agreed tariff", tick)
                self._close(tick, forced=True, reason="protocol-violation")
                return
            self._goto(StationState.CHARGING, tick)
        elif kind == "stop" and self.state in (StationState.CHARGING, StationState.CHANNEL_OPEN):
            s.stop_requested = True
        elif self.state is StationState.SETTLING:
            return  # in flight when the session closed
        else:
            self._violation(vid, f"unexpected {kind} in state {self.state.value}", tick)
            if s.channel is not None and s.channel.status is ChannelStatus.OPEN:
                self._close(tick, forced=True, reason="protocol-violation")

    def _on_pay(self, msg: dict, tick: int) -> None:
        s = self.session
        if s is None or s.channel is None or msg.get("channel_id") != s.channel.id:
            return
        ch = s.channel
        if ch.status is not ChannelStatus.OPEN:
            return
        latest = ch.latest
        amount = int(msg["amount"])
        state = ChannelState(seq=int(msg["seq"]), balance_a=latest.balance_a - amount,
                             balance_b=latest.balance_b + amount, sig_a=bytes.fromhex(msg["sig"]))
        try:
            signed = countersign(ch, self.keys, state, tick)
        except ChannelError as exc:
            self._violation(s.vehicle_id, f"bad payment: {exc}", tick)
            self._close(tick, forced=True, reason="protocol-violation")
            return
        self.services.log("state", tick, channel_id=ch.id, seq=signed.seq, balance_a=signed.balance_a,
                          balance_b=signed.balance_b)

    # -- per-tick ----------------------------------------------------------

    def prepare(self, tick: int) -> None:
        """Session bookkeeping before power allocation; sets the EVSE request."""
        self.evse.requested = 0
        s = self.session
        if s is None:
            return
        ch = s.channel
        if self.state is StationState.AUTHENTICATING and ch is not None:
            if ch.status is ChannelStatus.OPEN:
                self._goto(StationState.CHANNEL_OPEN, tick)
                self._reply(s.vehicle_id, {"type": "channel_open", "station_id": self.id, "channel_id": ch.id}, tick)
            elif ch.status is ChannelStatus.CLOSED:
                self._teardown(tick)
            return
        if self.state in (StationState.CHANNEL_OPEN, StationState.CHARGING) and ch.status is ChannelStatus.CLOSED:
            # counterparty settled unilaterally
            s.closing_reason = s.closing_reason or "counterparty-close"
            self._goto(StationState.SETTLING, tick)
        if self.state is StationState.SETTLING:
            return
        if self.state is StationState.CHANNEL_OPEN:
            if s.stop_requested:
                self._close(tick, forced=False, reason="stopped")
            return
        if self.state is not StationState.CHARGING:
            return
        delivered = self.meter.cumulative_energy - s.meter_start
        unpaid = s.published_due - s.paid()
        if unpaid > 0:
            s.unpaid_ticks += 1
        else:
            s.unpaid_ticks = 0
        s.paused = s.unpaid_ticks > self.payment_lag
        done = s.stop_requested or delivered >= s.target_j
        if s.paused and s.unpaid_ticks > self.payment_lag + self.payment_grace:
            self._violation(s.vehicle_id, "payment default", tick)
            self._close(tick, forced=True, reason="payment-default")
            return
        if done and not s.paused:
            self._close(tick, forced=False, reason="target-met" if delivered >= s.target_j else "stopped")
            return
        if not s.paused and not done:
            self.evse.requested = min(self.power_max, s.target_j - delivered)

    def meter_tick(self, tick: int, dt: int = 1) -> int:
        if self.state is not StationState.CHARGING:
            raise NotCharging(f"station {self.id} is {self.state.value}")
        if dt != 1:
            raise ValueError("tick length is fixed at one second")
        delta = self.evse.setpoint * dt
        self.meter.record(delta)
        s = self.session
        due = s.acc.bill(delta, s.tariff)
        due = self.behavior.adjust_due(due, tick)
        s.published_due += due
        self.bus.send(self.name, netbus.topic_meter(self.id, s.vehicle_id), {
            "session": s.id, "tick": tick, "delta_j": delta,
            "cumulative_j": self.meter.cumulative_energy - s.meter_start, "due_tokens": due,
        }, tick)
        return delta

    def finish(self, tick: int) -> None:
        """Settling -> Idle once the settlement bundle is out."""
        if self.state is StationState.SETTLING:
            self._teardown(tick)

    def _close(self, tick: int, *, forced: bool, reason: str) -> None:
        s = self.session
        s.closing_reason = reason
        if s.channel is not None and s.channel.status is ChannelStatus.OPEN:
            self.services.close_channel(s.channel, "station", tick, forced=forced, reason=reason)
            self._reply(s.vehicle_id, {"type": "closed", "station_id": self.id, "channel_id": s.channel.id,
                                       "reason": reason, "forced": forced}, tick)
        self._goto(StationState.SETTLING, tick)

    def _teardown(self, tick: int) -> None:
        s = self.session
        if s is not None and s.pay_sub is not None:
            self.bus.unsubscribe(s.pay_sub)
        self.session = None
        self.evse.requested = 0
        self.evse.setpoint = 0
        if self.state is not StationState.SETTLING:
            self._goto(StationState.SETTLING, tick)
        self._goto(StationState.IDLE, tick)

    def request_stop(self) -> bool:
        """Manual stop from the station side; the session settles at the next prepare."""
        if self.session is None or self.state not in (StationState.CHANNEL_OPEN, StationState.CHARGING):
            return False
        self.session.stop_requested = True
        return True

    def force_close(self, tick: int, reason: str = "interrupted") -> bool:
        """Unilateral close of the active channel (used by interruption scenarios)."""
        s = self.session
        if s is None or s.channel is None or s.channel.status is not ChannelStatus.OPEN:
            return False
        self._close(tick, forced=True, reason=reason)
        return True
