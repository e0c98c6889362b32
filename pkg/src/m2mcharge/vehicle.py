"""Electric autonomous vehicle: BMS, station discovery, bill audit and payment."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

from . import netbus, wallet
from .agents import Services
from .channel import ChannelStatus, FlashChannel, stream_payment
from .errors import ChannelError, M2MError, NoneAvailable
from .station import MICRO, BillingAccumulator

DEPOSIT_QUANTUM = 1000
AUTH_TIMEOUT = 100


class VehicleState(str, enum.Enum):
    INACTIVE = "Inactive"
    SEEKING = "Seeking"
    AUTHENTICATING = "Authenticating"
    CHARGING = "Charging"
    DONE = "Done"


_ORDER = list(VehicleState)


@dataclass
class ChargePlan:
    target_energy: int
    agreed_tariff: int
    station_id: int
    channel_id: str = ""


@dataclass
class HonestPayer:
    """Vehicle-side behaviour hook; adversaries replace it."""

    def should_pay(self, tick: int) -> bool:
        return True


@dataclass
class VehicleSession:
    station_id: int
    started: int
    plan: ChargePlan | None = None
    channel: FlashChannel | None = None
    acc: BillingAccumulator = field(default_factory=BillingAccumulator)
    owed_at: dict[int, int] = field(default_factory=dict)
    received: int = 0
    paid: int = 0
    stop_sent: bool = False
    subs: list[int] = field(default_factory=list)


def deposit_for(target_j: int, tariff: int) -> int:
    """Estimated session cost rounded up to the next 1000 tokens (never zero)."""
    cost = -(-target_j * tariff // MICRO)
    return max(DEPOSIT_QUANTUM, -(-cost // DEPOSIT_QUANTUM) * DEPOSIT_QUANTUM)


def discover_station(location: tuple[float, float], adverts: dict[int, dict],
                     exclude: set[int] | frozenset = frozenset()) -> int:
    """Nearest available advertised station; ties go to the lowest id."""
    best = None
    for sid, ad in adverts.items():
        if not ad.get("available") or sid in exclude:
            continue
        key = (math.dist(location, tuple(ad["location"])), sid)
        if best is None or key < best:
            best = key
    if best is None:
        raise NoneAvailable("no available charging station advertised")
    return best[1]


class EAV:
    def __init__(self, vehicle_id: int, keys: wallet.KeyPair, *, location: tuple[float, float],
                 battery_capacity: int, battery_level: int, bms_threshold: float = 0.2,
                 drain_w: int = 0, accept_tariff_max: int | None = None, charge_to: float = 1.0):
        if not 0 <= battery_level <= battery_capacity:
            raise ValueError("battery level outside [0, capacity]")
        self.id = vehicle_id
        self.keys = keys
        self.location = location
        self.battery_capacity = battery_capacity
        self.battery_level = battery_level
        self.bms_threshold = bms_threshold
        self.drain_w = drain_w
        self.accept_tariff_max = accept_tariff_max
        self.charge_to = charge_to
        self.state = VehicleState.INACTIVE
        self.adverts: dict[int, dict] = {}
        self.avoid: dict[int, int] = {}
        self.session: VehicleSession | None = None
        self.behavior = HonestPayer()
        self.services: Services | None = None
        self.name = f"ev{vehicle_id}"

    def __repr__(self) -> str:
        return f"EAV({self.id}, {self.state.value}, {self.battery_level}/{self.battery_capacity} J)"

    def attach(self, services: Services) -> None:
        self.services = services
        services.bus.subscribe(self.name, "cs/+/advert")

    @property
    def bus(self) -> netbus.Bus:
        return self.services.bus

    def _goto(self, state: VehicleState) -> None:
        nxt = _ORDER[(_ORDER.index(self.state) + 1) % len(_ORDER)]
        if state is not nxt and not (state is VehicleState.DONE and self.state is not VehicleState.INACTIVE):
            raise M2MError(f"illegal vehicle transition {self.state.value} -> {state.value}")
        self.state = state

    # -- operations --------------------------------------------------------

    def bms_check(self) -> bool:
        return self.battery_level / self.battery_capacity < self.bms_threshold

    def charge_step(self, delta: int, tick: int) -> int:
        """Energy physically received this tick; may trigger the stop request."""
        if delta < 0:
            raise ValueError("negative energy")
        self.battery_level = min(self.battery_capacity, self.battery_level + delta)
        s = self.session
        if s is None or s.plan is None:
            return self.battery_level
        s.received += delta
        s.acc.bill(delta, s.plan.agreed_tariff)
        s.owed_at[tick] = s.acc.billed_total
        if s.received >= s.plan.target_energy and not s.stop_sent:
            self.request_stop(tick)
        return self.battery_level

    def request_stop(self, tick: int) -> None:
        s = self.session
        if s is None or s.stop_sent:
            return
        s.stop_sent = True
        self._send_demand({"type": "stop"}, tick)

    def verify_and_pay(self, msg: dict, tick: int) -> dict | None:
        """Pay the bill if it does not exceed what the vehicle itself metered.

        Returns the pay payload, or ``None`` when the bill was refused (which
        publishes a violation and force-closes the channel) or withheld.
        """
        s = self.session
        if self.state is not VehicleState.CHARGING or s is None or s.channel is None:
            raise M2MError("not charging")
        due = int(msg["due_tokens"])
        owed = s.owed_at.get(int(msg["tick"]), s.acc.billed_total)
        allowed = owed - s.paid
        if due > allowed or due < 0:
            self._report_violation(tick, due=due, allowed=allowed, metered_tick=int(msg["tick"]))
            return None
        if not self.behavior.should_pay(tick):
            return None
        state = stream_payment(s.channel, self.keys, due, tick)
        s.paid += due
        payload = {"channel_id": s.channel.id, "seq": state.seq, "amount": due, "sig": state.sig_a.hex()}
        self.bus.send(self.name, netbus.topic_pay(self.id), payload, tick)
        return payload

    def _report_violation(self, tick: int, **detail) -> None:
        s = self.session
        report = {"vehicle_id": self.id, "station_id": s.station_id, "channel_id": s.channel.id,
                  "reason": "overbilling", "tick": tick, **detail}
        self.bus.send(self.name, netbus.topic_violation(self.id), report, tick)
        self.services.log("violation", tick, by=f"vehicle:{self.id}", vehicle=self.id, station=s.station_id,
                          reason="overbilling", channel_id=s.channel.id, **detail)
        self._force_close(tick, "overbilling")

    def _force_close(self, tick: int, reason: str) -> None:
        s = self.session
        if s.channel is not None and s.channel.status is ChannelStatus.OPEN:
            self.services.close_channel(s.channel, "vehicle", tick, forced=True, reason=reason)
        self._end(tick)

    def force_close(self, tick: int, reason: str = "interrupted") -> bool:
        s = self.session
        if s is None or s.channel is None or s.channel.status is not ChannelStatus.OPEN:
            return False
        self._force_close(tick, reason)
        return True

    # -- protocol ----------------------------------------------------------

    def _send_demand(self, payload: dict, tick: int) -> None:
        body = {"vehicle_id": self.id, "station_id": self.session.station_id, **payload}
        self.bus.send(self.name, netbus.topic_demand(self.id), body, tick)

    def _end(self, tick: int) -> None:
        s = self.session
        if s is not None:
            for sid in s.subs:
                self.bus.unsubscribe(sid)
        self.session = None
        if self.state is not VehicleState.DONE:
            self._goto(VehicleState.DONE)
        self._goto(VehicleState.INACTIVE)

    def _abort(self, tick: int, station_id: int, backoff: int = 20) -> None:
        self.avoid[station_id] = tick + backoff
        self._end(tick)

    def step(self, messages: list[netbus.Envelope], tick: int) -> None:
        for env in messages:
            msg = env.json()
            if env.topic.endswith("/advert"):
                self.adverts[int(msg["station_id"])] = msg
            elif self.session is not None:
                self._on_session(env.topic, msg, tick)
        self.avoid = {k: v for k, v in self.avoid.items() if v > tick}

        s = self.session
        if self.state is VehicleState.INACTIVE:
            if self.drain_w:
                self.battery_level = max(0, self.battery_level - self.drain_w)
            if self.bms_check():
                self._goto(VehicleState.SEEKING)
        if self.state is VehicleState.SEEKING:
            try:
                sid = discover_station(self.location, self.adverts, set(self.avoid))
            except NoneAvailable:
                return
            self.session = VehicleSession(station_id=sid, started=tick)
            self.session.subs = [self.bus.subscribe(self.name, netbus.topic_bill(sid, self.id)),
                                 self.bus.subscribe(self.name, netbus.topic_meter(sid, self.id))]
            self._goto(VehicleState.AUTHENTICATING)
            self._send_demand({"type": "hello", "public_key": self.keys.public.hex(),
                               "address": self.keys.address_hex}, tick)
        elif self.state is VehicleState.AUTHENTICATING:
            if s is not None and s.channel is not None and s.channel.status is ChannelStatus.CLOSED:
                self._end(tick)  # opening bundle never confirmed
            elif s is not None and s.channel is None and tick - s.started > AUTH_TIMEOUT:
                self._send_demand({"type": "abort"}, tick)
                self._abort(tick, s.station_id)
        elif self.state is VehicleState.CHARGING:
            if s is not None and s.channel is not None and s.channel.status is ChannelStatus.CLOSED:
                self._end(tick)
        elif self.state is VehicleState.DONE:
            self._goto(VehicleState.INACTIVE)

    def _on_session(self, topic: str, msg: dict, tick: int) -> None:
        s = self.session
        if topic.endswith("/meter"):
            if self.state is VehicleState.CHARGING and s.channel is not None \
                    and s.channel.status is ChannelStatus.OPEN:
                try:
                    self.verify_and_pay(msg, tick)
                except ChannelError:
                    self._force_close(tick, "channel-error")
            return
        kind = msg.get("type")
        if int(msg.get("station_id", -1)) != s.station_id:
            return
        if kind == "accept" and self.state is VehicleState.AUTHENTICATING and s.plan is None:
            tariff = int(msg["tariff_tokens_per_MJ"])
            if self.accept_tariff_max is not None and tariff > self.accept_tariff_max:
                self._send_demand({"type": "abort"}, tick)
                self._abort(tick, s.station_id, backoff=200)
                return
            full = int(self.battery_capacity * self.charge_to)
            target = max(0, full - self.battery_level)
            if target == 0:
                self._send_demand({"type": "abort"}, tick)
                self._abort(tick, s.station_id)
                return
            s.plan = ChargePlan(target_energy=target, agreed_tariff=tariff, station_id=s.station_id)
            self._send_demand({"type": "open", "deposit_each": deposit_for(target, tariff),
                               "target_energy_j": target}, tick)
        elif kind in ("busy", "rejected") and self.state is VehicleState.AUTHENTICATING:
            self._abort(tick, s.station_id)
        elif kind == "channel_opening" and s.plan is not None:
            s.channel = self.services.channel(msg["channel_id"])
            s.plan.channel_id = msg["channel_id"]
        elif kind == "channel_open" and self.state is VehicleState.AUTHENTICATING and s.channel is not None:
            self._goto(VehicleState.CHARGING)
            self._send_demand({"type": "demand", "target_energy_j": s.plan.target_energy,
                               "accept_tariff_max": self.accept_tariff_max
                               if self.accept_tariff_max is not None else s.plan.agreed_tariff}, tick)
        elif kind == "closed":
            if self.state in (VehicleState.AUTHENTICATING, VehicleState.CHARGING):
                self._end(tick)
