import pytest

from m2mcharge import netbus
from m2mcharge.channel import ChannelStatus
from m2mcharge.errors import M2MError, NoneAvailable
from m2mcharge.vehicle import VehicleState, deposit_for, discover_station

from conftest import make_eav, meter


class TestBms:
    def test_low_battery(self, alice):
        assert make_eav(alice, level=100).bms_check() is True

    def test_exact_threshold_is_not_low(self, alice):
        assert make_eav(alice, level=200_000).bms_check() is False

    def test_full(self, alice):
        assert make_eav(alice, level=1_000_000).bms_check() is False

    def test_level_bounds(self, alice):
        with pytest.raises(ValueError):
            make_eav(alice, level=2_000_000)


def ad(x, y, available=True):
    return {"location": [x, y], "available": available}


class TestDiscovery:
    def test_nearest(self):
        assert discover_station((2, 0), {1: ad(0, 0), 2: ad(10, 0)}) == 1

    def test_tie_lowest_id(self):
        assert discover_station((0, 0), {7: ad(5, 0), 3: ad(-5, 0)}) == 3

    def test_none_available(self):
        with pytest.raises(NoneAvailable):
            discover_station((0, 0), {1: ad(0, 0, False), 2: ad(1, 1, False)})

    def test_excluded(self):
        assert discover_station((0, 0), {1: ad(0, 0), 2: ad(9, 9)}, exclude={1}) == 2


def test_deposit_rounding():
    assert deposit_for(3600, 2_000_000) == 8000
    assert deposit_for(500_000, 2_000_000) == 1_000_000
    assert deposit_for(1, 1) == 1000


class TestVerifyAndPay:
    def test_pays_matching_bill(self, world, charging):
        charging.charge_step(3600, 10)
        out = charging.verify_and_pay(meter(10, 3600, 7200), 10)
        assert out["amount"] == 7200 and out["seq"] == 1
        world.bus.step(10)
        (pay,) = [e for e in world.bus.drain("watch") if e.topic == "ev/0/pay"]
        assert set(pay.json()) == {"channel_id", "seq", "amount", "sig"}

    def test_overbill_by_one(self, world, charging):
        charging.charge_step(3600, 10)
        assert charging.verify_and_pay(meter(10, 3600, 7201), 10) is None
        world.bus.step(10)
        topics = [e.topic for e in world.bus.drain("watch")]
        assert "ev/0/violation" in topics
        assert world.closed == [("vehicle", True, "overbilling")]
        assert world.kinds("violation")[0]["tick"] == 10
        assert charging.state is VehicleState.INACTIVE

    def test_zero_bill_still_advances(self, world, charging):
        charging.charge_step(0, 10)
        out = charging.verify_and_pay(meter(10, 0, 0), 10)
        assert out["amount"] == 0 and out["seq"] == 1

    def test_not_charging(self, world, alice):
        ev = make_eav(alice)
        ev.attach(world)
        with pytest.raises(M2MError):
            ev.verify_and_pay(meter(0, 0, 0), 0)

    def test_never_pays_ahead_of_energy(self, world, charging):
        paid = 0
        for tick, delta in enumerate([1, 1, 1, 3, 0, 2]):
            charging.charge_step(delta, tick)
            due = charging.session.owed_at[tick] - paid
            out = charging.verify_and_pay(meter(tick, delta, due), tick)
            paid += out["amount"]
            assert paid <= charging.session.acc.billed_total


class TestChargeStep:
    def test_adds_energy(self, alice):
        assert make_eav(alice, level=0).charge_step(3600, 0) == 3600

    def test_clamps(self, alice):
        assert make_eav(alice, level=999_000).charge_step(3600, 0) == 1_000_000

    def test_target_sends_stop(self, world, charging):
        charging.charge_step(60_000, 1)
        charging.charge_step(40_000, 2)
        world.bus.step(2)
        stops = [e.json() for e in world.bus.drain("watch") if e.topic == netbus.topic_demand(0)]
        assert stops == [{"vehicle_id": 0, "station_id": 0, "type": "stop"}]

    def test_session_end_leaves_inactive(self, world, charging, big_channel):
        assert charging.force_close(5)
        assert charging.state is VehicleState.INACTIVE
        assert big_channel.status is ChannelStatus.CLOSED
        assert not charging.force_close(6)
