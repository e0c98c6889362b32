"""In-process publish/subscribe bus with MQTT topic semantics.

Delivery only happens inside :meth:`Bus.step`. QoS 0 messages get one delivery
attempt; QoS 1 messages are retried on every step until acknowledged, and a
lost acknowledgement causes a redelivery that the inbox suppresses by
``(publisher, msg_id)``. Per subscriber, QoS 1 messages from one publisher on
one topic are delivered in publish order.
"""

from __future__ import annotations

import json
import random
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Any

from .errors import InvalidFilter, InvalidTopic


def canonical_json(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def validate_topic(topic: str) -> None:
    levels = topic.split("/")
    if any(lv == "" for lv in levels):
        raise InvalidTopic(f"empty level in {topic!r}")
    if any("+" in lv or "#" in lv for lv in levels):
        raise InvalidTopic(f"wildcard in publish topic {topic!r}")


def validate_filter(flt: str) -> None:
    levels = flt.split("/")
    for n, lv in enumerate(levels):
        if lv == "":
            raise InvalidFilter(f"empty level in {flt!r}")
        if "#" in lv and (lv != "#" or n != len(levels) - 1):
            raise InvalidFilter(f"'#' must be the whole final level in {flt!r}")
        if "+" in lv and lv != "+":
            raise InvalidFilter(f"'+' must occupy a whole level in {flt!r}")


def topic_matches(flt: str, topic: str) -> bool:
    f_levels = flt.split("/")
    t_levels = topic.split("/")
    for n, f in enumerate(f_levels):
        if f == "#":
            return True
        if n >= len(t_levels):
            return False
        if f != "+" and f != t_levels[n]:
            return False
    return len(f_levels) == len(t_levels)


@dataclass(frozen=True)
class Envelope:
    topic: str
    payload: bytes
    publisher: str
    publish_tick: int
    qos: int = 1
    msg_id: int = -1

    def json(self) -> Any:
        return json.loads(self.payload)


@dataclass
class Link:
    latency: int = 0
    drop: float = 0.0


@dataclass
class _Pending:
    env: Envelope
    subscriber: str
    due: int


@dataclass
class Bus:
    latency: int = 0
    drop: float = 0.0
    rng: random.Random = field(default_factory=lambda: random.Random(0))
    links: dict[str, Link] = field(default_factory=dict)

    def __post_init__(self):
        self._subs: dict[int, tuple[str, str]] = {}
        self._next_sub = 1
        self._match_cache: dict[str, list[str]] = {}
        self._pending: list[_Pending] = []
        self._next_msg: dict[str, int] = defaultdict(int)
        self._inboxes: dict[str, list[Envelope]] = defaultdict(list)
        self._seen: dict[str, set[tuple[str, int]]] = defaultdict(set)
        self._last_tick: int | None = None
        self.trace: list[tuple[int, str, str, int]] = []
        self.stats = {"published": 0, "delivered": 0, "dropped": 0, "duplicates": 0}

    def link(self, publisher: str) -> Link:
        return self.links.get(publisher) or Link(self.latency, self.drop)

    def subscribe(self, subscriber: str, flt: str) -> int:
        validate_filter(flt)
        sid = self._next_sub
        self._next_sub += 1
        self._subs[sid] = (subscriber, flt)
        self._match_cache.clear()
        return sid

    def unsubscribe(self, sid: int) -> None:
        self._subs.pop(sid, None)
        self._match_cache.clear()

    def _subscribers(self, topic: str) -> list[str]:
        hit = self._match_cache.get(topic)
        if hit is None:
            hit = sorted({s for s, f in self._subs.values() if topic_matches(f, topic)})
            self._match_cache[topic] = hit
        return hit

    def publish(self, env: Envelope) -> Envelope:
        """Enqueue ``env``; a negative ``msg_id`` is replaced by the publisher's next id."""
        validate_topic(env.topic)
        if env.qos not in (0, 1):
            raise ValueError("qos must be 0 or 1")
        if env.msg_id < 0:
            env = Envelope(env.topic, env.payload, env.publisher, env.publish_tick, env.qos,
                           self._next_msg[env.publisher])
        self._next_msg[env.publisher] = max(self._next_msg[env.publisher], env.msg_id + 1)
        due = env.publish_tick + self.link(env.publisher).latency
        for sub in self._subscribers(env.topic):
            self._pending.append(_Pending(env, sub, due))
        self.stats["published"] += 1
        return env

    def send(self, publisher: str, topic: str, payload: dict, tick: int, qos: int = 1) -> Envelope:
        return self.publish(Envelope(topic, canonical_json(payload), publisher, tick, qos))

    def _lost(self, drop: float) -> bool:
        if drop <= 0.0:
            return False
        if drop >= 1.0:
            return True
        return self.rng.random() < drop

    def step(self, tick: int) -> int:
        """Deliver every due message; returns the number placed in inboxes."""
        if self._last_tick is not None and tick < self._last_tick:
            raise ValueError("ticks must not go backwards")
        self._last_tick = tick
        due = [p for p in self._pending if p.due <= tick]
        if not due:
            return 0
        due.sort(key=lambda p: (p.env.publish_tick, p.env.publisher, p.env.msg_id, p.subscriber))
        keep: list[_Pending] = [p for p in self._pending if p.due > tick]
        blocked: set[tuple[str, str, str]] = set()
        delivered = 0
        for p in due:
            env = p.env
            drop = self.link(env.publisher).drop
            stream = (p.subscriber, env.publisher, env.topic)
            if env.qos == 1 and stream in blocked:
                keep.append(p)
                continue
            if self._lost(drop):
                self.stats["dropped"] += 1
                if env.qos == 1:
                    blocked.add(stream)
                    keep.append(p)
                continue
            key = (env.publisher, env.msg_id)
            seen = self._seen[p.subscriber]
            if key in seen:
                self.stats["duplicates"] += 1
            else:
                seen.add(key)
                self._inboxes[p.subscriber].append(env)
                self.trace.append((tick, p.subscriber, env.publisher, env.msg_id))
                delivered += 1
            if env.qos == 1 and self._lost(drop):
                # acknowledgement lost: the broker will redeliver next step
                keep.append(p)
        self._pending = keep
        self.stats["delivered"] += delivered
        return delivered

    def inbox(self, subscriber: str) -> list[Envelope]:
        return list(self._inboxes.get(subscriber, ()))

    def drain(self, subscriber: str) -> list[Envelope]:
        box = self._inboxes.pop(subscriber, None)
        return box or []

    @property
    def pending_count(self) -> int:
        return len(self._pending)


def topic_advert(station: int | str) -> str:
    return f"cs/{station}/advert"


def topic_meter(station: int | str, vehicle: int | str) -> str:
    return f"cs/{station}/session/{vehicle}/meter"


def topic_bill(station: int | str, vehicle: int | str) -> str:
    return f"cs/{station}/session/{vehicle}/bill"


def topic_pay(vehicle: int | str) -> str:
    return f"ev/{vehicle}/pay"


def topic_violation(vehicle: int | str) -> str:
    return f"ev/{vehicle}/violation"


def topic_demand(vehicle: int | str) -> str:
    return f"ev/{vehicle}/demand"
