from __future__ import annotations

import random
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from m2mcharge import channel as chan  # noqa: E402
from m2mcharge import netbus, wallet  # noqa: E402
from m2mcharge.ledger import Mode, Tangle, transfer  # noqa: E402
from m2mcharge.vehicle import EAV, ChargePlan, VehicleSession, VehicleState  # noqa: E402

ROOT = Path(__file__).resolve().parents[1]
SCENARIOS = ROOT / "scenarios"
SUPPLY = 1_000_000


def funded_tangle(*keys: wallet.KeyPair, amount: int = 10_000, mode: Mode = Mode.COORDINATOR,
                  difficulty: int = 0, seed: int = 1) -> tuple[Tangle, wallet.KeyPair, random.Random]:
    """Tangle whose treasury has paid ``amount`` to each key, confirmed by one milestone."""
    treasury = wallet.derive(900_000 + seed)
    coord = wallet.derive(910_000 + seed)
    t = Tangle(treasury.address, SUPPLY, difficulty=difficulty, mode=mode,
               coordinator=coord if mode is Mode.COORDINATOR else None)
    rng = random.Random(seed)
    if keys:
        moves = {treasury.address: -amount * len(keys), **{k.address: amount for k in keys}}
        t.attach_bundle(transfer(0, moves, tag=b"fund").sign_with(treasury), rng)
    if mode is Mode.COORDINATOR:
        t.issue_milestone(tick=0)
    else:
        for n in range(t.k + 1):
            t.attach_data(treasury.address, 0, b"w%d" % n, rng)
    return t, treasury, rng


@pytest.fixture
def alice():
    return wallet.derive(101)


@pytest.fixture
def bob():
    return wallet.derive(202)


@pytest.fixture
def carol():
    return wallet.derive(303)


class World:
    """Minimal stand-in for the simulation's services, for driving one agent by hand."""

    def __init__(self, tangle: Tangle, rng: random.Random, keys: dict[str, wallet.KeyPair]):
        self.bus = netbus.Bus()
        self.tangle = tangle
        self.rng = rng
        self.keys = keys
        self.events: list[dict] = []
        self.channels: dict[str, chan.FlashChannel] = {}
        self.closed: list[tuple[str, bool, str]] = []

    def log(self, kind: str, tick: int, **fields) -> None:
        self.events.append({"kind": kind, "tick": tick, **fields})

    def open_channel(self, vehicle_id, station_id, deposit_each, tick, tariff, target_j):
        ch = chan.open_channel(self.tangle, self.keys["vehicle"], self.keys["station"], deposit_each,
                               self.rng, tick=tick, nonce=len(self.channels) + 1)
        self.channels[ch.id] = ch
        return ch

    def close_channel(self, channel, initiator, tick, *, forced, reason):
        party = self.keys[initiator]
        if forced:
            chan.forced_close(channel, self.tangle, party.public, self.rng, tick)
        else:
            chan.cooperative_close(channel, self.tangle, self.rng, tick)
        self.closed.append((initiator, forced, reason))

    def channel(self, channel_id):
        return self.channels.get(channel_id)

    def kinds(self, kind: str) -> list[dict]:
        return [e for e in self.events if e["kind"] == kind]


@pytest.fixture
def world(alice, bob):
    t, _, rng = funded_tangle(alice, bob, amount=50_000)
    return World(t, rng, {"vehicle": alice, "station": bob})


@pytest.fixture
def open_channel_ab(world, alice, bob):
    """An open 5000/5000 channel between alice (a, payer) and bob (b, payee)."""
    ch = world.open_channel(0, 0, 5000, 0, 0, 0)
    for tick in range(1, 6):
        world.tangle.issue_milestone(tick=tick)
        if chan.poll_open(ch, world.tangle, tick):
            return ch
    raise AssertionError("opening bundle never confirmed")


def make_eav(keys, level=100_000, capacity=1_000_000, threshold=0.2):
    return EAV(0, keys, location=(0.0, 0.0), battery_capacity=capacity, battery_level=level,
               bms_threshold=threshold)


def meter(tick, delta, due):
    return {"session": "s", "tick": tick, "delta_j": delta, "cumulative_j": delta, "due_tokens": due}


@pytest.fixture
def big_channel(world):
    ch = world.open_channel(0, 0, 20_000, 0, 0, 0)
    for tick in range(1, 6):
        world.tangle.issue_milestone(tick=tick)
        if chan.poll_open(ch, world.tangle, tick):
            return ch
    raise AssertionError("opening bundle never confirmed")


@pytest.fixture
def charging(world, big_channel, alice):
    ev = make_eav(alice)
    ev.attach(world)
    ev.state = VehicleState.CHARGING
    ev.session = VehicleSession(station_id=0, started=0,
                                plan=ChargePlan(100_000, 2_000_000, 0, big_channel.id), channel=big_channel)
    world.bus.subscribe("watch", "ev/0/#")
    return ev


def meter(tick, delta, due):
    return {"session": "s", "tick": tick, "delta_j": delta, "cumulative_j": delta, "due_tokens": due}
